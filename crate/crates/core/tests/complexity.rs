//! Cost counter and dependency graph against the kernel and closed forms.

use dilattn_core::complexity::{
    analytic_flops, count_flops, geometric_bound, max_path_length, path_length_bound,
    DependencyGraph,
};
use dilattn_core::dilated::{dilated_forward, DilatedConfig};
use dilattn_core::tensor_core::RealMatrix;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn graph_matches_attention_support() {
    let n = 32;
    let configs = [
        DilatedConfig::geometric(4, 2, n).unwrap(),
        DilatedConfig::new(&[(8, 2), (32, 8)], 1).unwrap(),
        DilatedConfig::unordered(&[(16, 3), (4, 1)], 1).unwrap(),
    ];
    let mut rng = StdRng::seed_from_u64(0);
    for cfg in configs {
        for causal in [false, true] {
            let cfg = cfg.clone().with_causal(causal);
            let q = RealMatrix::<f64>::random(n, n, &mut rng);
            let k = RealMatrix::random(n, n, &mut rng);
            // one-hot values: output column t carries the attention mass on key t
            let v = RealMatrix::identity(n);
            let out = dilated_forward(&q, &k, &v, &cfg).unwrap();
            let graph = DependencyGraph::build(n, &cfg).unwrap();
            for p in 0..n {
                for t in 0..n {
                    assert_eq!(
                        out.output.get(p, t) > 0.0,
                        graph.can_attend(p, t),
                        "{p}->{t} causal={causal}"
                    );
                }
            }
        }
    }
}

#[test]
fn cost_grows_linearly_and_stays_under_bound() {
    for (w0, alpha, d) in [(4, 2, 1), (8, 2, 3), (4, 4, 2), (16, 2, 8)] {
        let mut prev: Option<u64> = None;
        let mut n = w0 * alpha;
        while n <= 4096 {
            let cfg = DilatedConfig::geometric(w0, alpha, n).unwrap();
            let report = count_flops(n, d, &cfg).unwrap();
            assert!(report.exact_match, "{report:?}");
            assert!(report.measured_macs as f64 <= geometric_bound(w0, alpha, n, d));
            if let Some(p) = prev {
                // growing n by α multiplies the old terms by α and adds one top pattern
                let top = *cfg.patterns().last().unwrap();
                let added = analytic_flops(n, d, &[top]) as u64;
                assert!(report.measured_macs <= alpha as u64 * p + added);
            }
            prev = Some(report.measured_macs);
            n *= alpha;
        }
    }
}

#[test]
fn multi_head_cost_splits_width() {
    // heads partition the width, so the count matches the single-head model
    let cfg = DilatedConfig::geometric(4, 2, 64)
        .unwrap()
        .with_heads(4)
        .unwrap();
    let r = count_flops(64, 16, &cfg).unwrap();
    assert!(r.exact_match);
    assert_eq!(
        r.measured_macs as f64,
        analytic_flops(64, 16, cfg.patterns())
    );
}

#[test]
fn diameter_within_log_bound() {
    // the log bound holds once the base segment spans w0 >= α² tokens
    for (w0, alpha) in [(4, 2), (8, 2), (16, 4), (9, 3)] {
        for heads in [1, alpha] {
            let mut n = w0 * alpha;
            while n <= 2048 {
                let cfg = DilatedConfig::geometric(w0, alpha, n)
                    .unwrap()
                    .with_heads(heads)
                    .unwrap();
                let hops = max_path_length(n, &cfg).unwrap().hops().expect("connected");
                assert!(
                    hops <= path_length_bound(n, w0, alpha),
                    "w0={w0} α={alpha} n={n}: {hops}"
                );
                n *= alpha;
            }
        }
    }
}

#[test]
fn short_base_segment_needs_extra_hops() {
    // w0 = 2, α = 2: an odd token must first step to its even neighbour at
    // every level, so the diameter grows by two hops per pattern
    for k in 2..=6 {
        let n = 2 << k;
        let cfg = DilatedConfig::geometric(2, 2, n).unwrap();
        let hops = max_path_length(n, &cfg).unwrap().hops().unwrap();
        assert_eq!(hops, 2 * k + 1);
        assert!(hops > path_length_bound(n, 2, 2));
    }
}
