//! Invariant suites behind `--verify`.

use dilattn_core::complexity::{count_flops, max_path_length, path_length_bound};
use dilattn_core::dilated::{
    dilated_backward, dilated_forward, gathered_softmax_oracle, DilatedConfig,
};
use dilattn_core::distributed::{
    communication_sweep, distributed_dilated_backward, distributed_dilated_forward, shard_qkv,
    split_rows,
};
use dilattn_core::tensor_core::{dense_attention, positions, RealMatrix};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::BenchError;

pub const SUITES: [&str; 6] = [
    "dense",
    "mixture",
    "gradients",
    "flops",
    "paths",
    "distributed",
];

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    /// Worst observed error, or a count for structural checks.
    pub observed: f64,
    /// `None` for exact (non-floating) checks.
    pub tolerance: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Suites to run; all when empty.
    pub only: Vec<String>,
    /// Replaces every floating-point tolerance.
    pub tolerance: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<52} {:>12} {:>10}  result\n",
            "suite", "check", "observed", "tolerance"
        );
        for c in &self.checks {
            let tol = c
                .tolerance
                .map_or_else(|| "exact".to_string(), |t| format!("{t:.0e}"));
            out += &format!(
                "{:<12} {:<52} {:>12.3e} {:>10}  {}\n",
                c.suite,
                c.name,
                c.observed,
                tol,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

struct Ctx<'a> {
    opts: &'a VerifyOptions,
    checks: Vec<Check>,
}

impl Ctx<'_> {
    fn float(
        &mut self,
        suite: &'static str,
        name: impl Into<String>,
        observed: f64,
        default_tol: f64,
    ) {
        let tol = self.opts.tolerance.unwrap_or(default_tol);
        self.checks.push(Check {
            suite,
            name: name.into(),
            observed,
            tolerance: Some(tol),
            passed: observed <= tol,
        });
    }

    fn exact(&mut self, suite: &'static str, name: impl Into<String>, observed: f64, passed: bool) {
        self.checks.push(Check {
            suite,
            name: name.into(),
            observed,
            tolerance: None,
            passed,
        });
    }
}

/// Runs the selected suites. Unknown suite names are an argument error.
pub fn run_verification_suite(opts: &VerifyOptions) -> Result<VerifyReport, BenchError> {
    if let Some(bad) = opts.only.iter().find(|s| !SUITES.contains(&s.as_str())) {
        return Err(BenchError::Args(format!(
            "unknown suite '{bad}', expected one of {SUITES:?}"
        )));
    }
    let wanted = |s: &str| opts.only.is_empty() || opts.only.iter().any(|o| o == s);
    let mut ctx = Ctx {
        opts,
        checks: Vec::new(),
    };
    if wanted("dense") {
        dense_suite(&mut ctx)?;
    }
    if wanted("mixture") {
        mixture_suite(&mut ctx)?;
    }
    if wanted("gradients") {
        gradient_suite(&mut ctx)?;
    }
    if wanted("flops") {
        flops_suite(&mut ctx)?;
    }
    if wanted("paths") {
        paths_suite(&mut ctx)?;
    }
    if wanted("distributed") {
        distributed_suite(&mut ctx)?;
    }
    Ok(VerifyReport { checks: ctx.checks })
}

fn random3(n: usize, d: usize, rng: &mut StdRng) -> (RealMatrix, RealMatrix, RealMatrix) {
    (
        RealMatrix::random(n, d, rng),
        RealMatrix::random(n, d, rng),
        RealMatrix::random(n, d, rng),
    )
}

fn dense_suite(ctx: &mut Ctx) -> Result<(), BenchError> {
    let mut rng = StdRng::seed_from_u64(ctx.opts.seed);
    for heads in [1, 4] {
        for causal in [false, true] {
            let mut worst = 0.0f64;
            for n in (8..=256).step_by(8) {
                let cfg = DilatedConfig::new(&[(n, 1)], heads)?.with_causal(causal);
                let dh = 4;
                let (q, k, v) = random3(n, heads * dh, &mut rng);
                let out = dilated_forward(&q, &k, &v, &cfg)?;
                let pos = positions(n);
                let scale = 1.0 / (dh as f64).sqrt();
                for h in 0..heads {
                    let c = |m: &RealMatrix| m.column_block(h * dh, dh);
                    let dense = dense_attention(&c(&q), &c(&k), &c(&v), causal, scale, &pos, &pos)?;
                    worst = worst.max(
                        c(&out.output)
                            .max_abs_diff(&dense.output)
                            .unwrap_or(f64::INFINITY),
                    );
                }
            }
            ctx.float(
                "dense",
                format!("full segment == dense (heads={heads}, causal={causal})"),
                worst,
                1e-10,
            );
        }
    }
    Ok(())
}

/// Random schedule of up to three patterns whose segments divide `n`.
fn random_schedule(n: usize, rng: &mut StdRng) -> Vec<(usize, usize)> {
    let divisors: Vec<usize> = (1..=n)
        .filter(|w| n.is_multiple_of(*w) && *w >= 2)
        .collect();
    (0..rng.random_range(1..=3))
        .map(|_| {
            let w = divisors[rng.random_range(0..divisors.len())];
            (w, rng.random_range(1..=w.min(6)))
        })
        .collect()
}

fn mixture_suite(ctx: &mut Ctx) -> Result<(), BenchError> {
    let mut rng = StdRng::seed_from_u64(ctx.opts.seed.wrapping_add(1));
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = [8, 12, 16, 24, 32, 48, 64][rng.random_range(0..7)];
        let heads = rng.random_range(1..=3);
        let cfg = DilatedConfig::unordered(&random_schedule(n, &mut rng), heads)?
            .with_causal(rng.random());
        let (q, k, v) = random3(n, heads * rng.random_range(1..=4), &mut rng);
        let fast = dilated_forward(&q, &k, &v, &cfg)?;
        let slow = gathered_softmax_oracle(&q, &k, &v, &cfg)?;
        worst = worst.max(fast.output.max_abs_diff(&slow).unwrap_or(f64::INFINITY));
    }
    ctx.float(
        "mixture",
        "mixed patterns == one softmax over keys (50 cases)",
        worst,
        1e-10,
    );
    Ok(())
}

fn gradient_suite(ctx: &mut Ctx) -> Result<(), BenchError> {
    let mut rng = StdRng::seed_from_u64(ctx.opts.seed.wrapping_add(2));
    let cfg = DilatedConfig::new(&[(4, 1), (8, 2)], 1)?.with_causal(true);
    let n = 8;
    let (q, k, v) = random3(n, 3, &mut rng);
    let go = RealMatrix::random(n, 3, &mut rng);
    let grads = dilated_backward(&q, &k, &v, &cfg, &go)?;
    let loss = |q: &RealMatrix, k: &RealMatrix, v: &RealMatrix| -> Result<f64, BenchError> {
        let out = dilated_forward(q, k, v, &cfg)?;
        Ok(out
            .output
            .as_slice()
            .iter()
            .zip(go.as_slice())
            .map(|(a, b)| a * b)
            .sum())
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let which = rng.random_range(0..3);
        let (r, c) = (rng.random_range(0..n), rng.random_range(0..3));
        let bump = |delta: f64| -> Result<f64, BenchError> {
            let mut m = [q.clone(), k.clone(), v.clone()];
            m[which].set(r, c, m[which].get(r, c) + delta);
            loss(&m[0], &m[1], &m[2])
        };
        let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
        let analytic = [&grads.q, &grads.k, &grads.v][which].get(r, c);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3));
    }
    ctx.float(
        "gradients",
        "backward vs central differences (100 coords)",
        worst,
        1e-5,
    );
    Ok(())
}

fn flops_suite(ctx: &mut Ctx) -> Result<(), BenchError> {
    let cases: [(&str, usize, usize); 10] = [
        ("geo:4,2", 16, 1),
        ("geo:4,2", 64, 3),
        ("geo:8,2", 256, 4),
        ("geo:4,4", 256, 2),
        ("geo:16,2", 1024, 8),
        ("geo:2,2", 32, 5),
        ("geo:3,3", 81, 2),
        ("geo:64,2", 4096, 16),
        ("geo:8,4", 512, 1),
        ("geo:256,2", 8192, 64),
    ];
    for (preset, n, d) in cases {
        let cfg = DilatedConfig::preset(preset, n)?;
        let r = count_flops(n, d, &cfg)?;
        let passed = r.exact_match && r.within_bound() == Some(true);
        ctx.exact(
            "flops",
            format!("{preset} n={n} d={d}: counted == model <= bound"),
            r.measured_macs as f64,
            passed,
        );
    }
    Ok(())
}

fn paths_suite(ctx: &mut Ctx) -> Result<(), BenchError> {
    for (w0, alpha) in [(4, 2), (8, 2)] {
        for n in [16, 64, 256, 1024] {
            let cfg = DilatedConfig::geometric(w0, alpha, n)?;
            let hops = max_path_length(n, &cfg)?.hops();
            let bound = path_length_bound(n, w0, alpha);
            ctx.exact(
                "paths",
                format!("geo:{w0},{alpha} n={n}: diameter <= {bound}"),
                hops.map_or(f64::INFINITY, |h| h as f64),
                hops.is_some_and(|h| h <= bound),
            );
        }
    }
    Ok(())
}

fn distributed_suite(ctx: &mut Ctx) -> Result<(), BenchError> {
    let mut rng = StdRng::seed_from_u64(ctx.opts.seed.wrapping_add(3));
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    let mut deterministic = true;
    for (n, w0, causal) in [(64, 4, false), (256, 8, true), (1024, 16, true)] {
        let cfg = DilatedConfig::geometric(w0, 2, n)?
            .with_heads(2)?
            .with_causal(causal);
        let (q, k, v) = random3(n, 4, &mut rng);
        let go = RealMatrix::random(n, 4, &mut rng);
        let single = dilated_forward(&q, &k, &v, &cfg)?;
        let single_grads = dilated_backward(&q, &k, &v, &cfg, &go)?;
        for world in [1, 2, 4, 8] {
            let shards = shard_qkv(&q, &k, &v, world)?;
            let out = distributed_dilated_forward(&shards, &cfg)?;
            fwd = fwd.max(
                out.result
                    .output
                    .max_abs_diff(&single.output)
                    .unwrap_or(f64::INFINITY),
            );
            let gos = split_rows(&go, world)?;
            let g = distributed_dilated_backward(&shards, &cfg, &gos)?;
            bwd = bwd.max(
                g.assembled()?
                    .max_abs_diff(&single_grads)
                    .unwrap_or(f64::INFINITY),
            );
            deterministic &= distributed_dilated_backward(&shards, &cfg, &gos)? == g;
        }
    }
    ctx.float(
        "distributed",
        "forward == single device (D in 1,2,4,8)",
        fwd,
        1e-10,
    );
    ctx.float(
        "distributed",
        "backward == single device (D in 1,2,4,8)",
        bwd,
        1e-9,
    );
    ctx.exact(
        "distributed",
        "repeat runs bit-identical",
        0.0,
        deterministic,
    );
    let report = communication_sweep(4, 2, 4, 2, 4, &[64, 128, 256, 512], ctx.opts.seed)?;
    ctx.exact(
        "distributed",
        "gather volume == w0*d for every n",
        report.rows.iter().filter(|r| r.expected.is_some()).count() as f64,
        report.is_constant(),
    );
    Ok(())
}
