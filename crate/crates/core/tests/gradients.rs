//! Backward passes against central finite differences of the forward maps.

use dilattn_core::dilated::{dilated_backward, dilated_forward, DilatedConfig};
use dilattn_core::tensor_core::{
    dense_attention, dense_attention_backward, positions, Gradients, RealMatrix,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const STEP: f64 = 1e-5;

/// Relative error with the denominator floored at 1e-3, so entries whose true
/// value is ~0 are judged on absolute error instead of amplified round-off.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn loss(out: &RealMatrix, go: &RealMatrix) -> f64 {
    out.as_slice()
        .iter()
        .zip(go.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

/// Checks `count` random coordinates of `grads` against `∂/∂x Σ go ⊙ f(q, k, v)`.
fn check<F>(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    go: &RealMatrix,
    grads: &Gradients,
    count: usize,
    f: F,
) -> f64
where
    F: Fn(&RealMatrix, &RealMatrix, &RealMatrix) -> RealMatrix,
{
    let mut rng = StdRng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let which = rng.random_range(0..3);
        let (src, grad) = match which {
            0 => (q, &grads.q),
            1 => (k, &grads.k),
            _ => (v, &grads.v),
        };
        let (r, c) = (
            rng.random_range(0..src.rows()),
            rng.random_range(0..src.cols()),
        );
        let eval = |delta: f64| {
            let mut m = src.clone();
            m.set(r, c, m.get(r, c) + delta);
            let out = match which {
                0 => f(&m, k, v),
                1 => f(q, &m, v),
                _ => f(q, k, &m),
            };
            loss(&out, go)
        };
        let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(grad.get(r, c), fd));
    }
    worst
}

fn inputs(n: usize, d: usize, seed: u64) -> [RealMatrix; 4] {
    let mut rng = StdRng::seed_from_u64(seed);
    std::array::from_fn(|_| RealMatrix::random(n, d, &mut rng))
}

#[test]
fn dense_backward_small() {
    let [q, k, v, go] = inputs(4, 3, 1);
    let pos = positions(4);
    for causal in [false, true] {
        let g = dense_attention_backward(&q, &k, &v, causal, 0.6, &pos, &pos, &go).unwrap();
        let worst = check(&q, &k, &v, &go, &g, 36, |q, k, v| {
            dense_attention(q, k, v, causal, 0.6, &pos, &pos)
                .unwrap()
                .output
        });
        assert!(worst <= 1e-5, "causal={causal}: {worst:e}");
    }
}

#[test]
fn dense_backward_fifty_coordinates() {
    let [q, k, v, go] = inputs(8, 4, 2);
    let pos = positions(8);
    let g = dense_attention_backward(&q, &k, &v, false, 0.5, &pos, &pos, &go).unwrap();
    let worst = check(&q, &k, &v, &go, &g, 50, |q, k, v| {
        dense_attention(q, k, v, false, 0.5, &pos, &pos)
            .unwrap()
            .output
    });
    assert!(worst <= 1e-5, "{worst:e}");
}

#[test]
fn dilated_backward_through_mixture_weights() {
    for (causal, heads, seed) in [(false, 1, 3), (true, 1, 4), (false, 2, 5), (true, 2, 6)] {
        let cfg = DilatedConfig::new(&[(4, 1), (8, 2)], heads)
            .unwrap()
            .with_causal(causal);
        let [q, k, v, go] = inputs(8, 2 * heads, seed);
        let g = dilated_backward(&q, &k, &v, &cfg, &go).unwrap();
        let worst = check(&q, &k, &v, &go, &g, 100, |q, k, v| {
            dilated_forward(q, k, v, &cfg).unwrap().output
        });
        assert!(worst <= 1e-5, "causal={causal} heads={heads}: {worst:e}");
    }
}

#[test]
fn partially_covered_rows() {
    // no r = 1 pattern: some (head, row) pairs attend to nothing
    let cfg = DilatedConfig::new(&[(4, 2), (8, 4)], 1).unwrap();
    let [q, k, v, go] = inputs(8, 3, 7);
    let g = dilated_backward(&q, &k, &v, &cfg, &go).unwrap();
    let worst = check(&q, &k, &v, &go, &g, 100, |q, k, v| {
        dilated_forward(q, k, v, &cfg).unwrap().output
    });
    assert!(worst <= 1e-5, "{worst:e}");
    // rows 1, 3, 5, 7 are never selected
    for r in [1, 3, 5, 7] {
        assert!(g.q.is_zero_row(r) && g.k.is_zero_row(r) && g.v.is_zero_row(r));
    }
}
