use std::time::Instant;

use dilattn_core::dilated::{
    dilated_forward_instrumented, dilated_forward_padded_instrumented, DilatedConfig,
};
use dilattn_core::distributed::{distributed_dilated_forward, shard_qkv};
use dilattn_core::tensor_core::multi_head_attention_counted;
use dilattn_core::RealMatrix;
use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::record::{BenchRecord, Kernel};
use crate::BenchError;

/// What to time. Kernels run at 32-bit precision.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub kernel: Kernel,
    pub n_values: Vec<usize>,
    /// Full model width; each head gets `d / heads` columns.
    pub d: usize,
    pub heads: usize,
    pub causal: bool,
    /// Dilated schedule, see [`DilatedConfig::preset`].
    pub preset: String,
    pub world_size: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
    /// Zero-pad lengths that the schedule does not divide.
    pub pad: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            kernel: Kernel::Dilated,
            n_values: vec![1024],
            d: 64,
            heads: 1,
            causal: false,
            preset: "geo:256,2".into(),
            world_size: 1,
            repeats: 5,
            warmups: 2,
            seed: 0,
            pad: false,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repeats < 3 {
            return Err(BenchError::Args(format!(
                "need at least 3 repeats, got {}",
                self.repeats
            )));
        }
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(BenchError::Args("sequence lengths must be positive".into()));
        }
        if self.d == 0 || self.heads == 0 || self.world_size == 0 {
            return Err(BenchError::Args(
                "d, heads and world size must be positive".into(),
            ));
        }
        if self.kernel == Kernel::Dense && self.world_size != 1 {
            return Err(BenchError::Args(
                "the dense kernel runs on a single device".into(),
            ));
        }
        if self.pad && self.world_size != 1 {
            return Err(BenchError::Args(
                "padding is only supported on a single device".into(),
            ));
        }
        Ok(())
    }
}

/// A length that could not be benchmarked; the sweep continues past it.
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedRow {
    pub kernel: Kernel,
    pub n: usize,
    pub reason: String,
}

/// Times every requested length. Invalid `(n, config)` combinations become
/// [`SkippedRow`]s instead of aborting the sweep.
pub fn run_benchmark(spec: &BenchSpec) -> Result<Vec<Result<BenchRecord, SkippedRow>>, BenchError> {
    spec.validate()?;
    Ok(spec
        .n_values
        .iter()
        .map(|&n| {
            run_one(spec, n).map_err(|e| SkippedRow {
                kernel: spec.kernel,
                n,
                reason: e.to_string(),
            })
        })
        .collect())
}

/// Schedule for length `n`; with `pad`, the shortest length `>= n` the
/// preset accepts.
pub fn config_for(spec: &BenchSpec, n: usize) -> Result<DilatedConfig, BenchError> {
    let build = |m: usize| -> Result<DilatedConfig, BenchError> {
        Ok(DilatedConfig::preset(&spec.preset, m)?
            .with_heads(spec.heads)?
            .with_causal(spec.causal))
    };
    let first = build(n);
    if !spec.pad || first.is_ok() {
        return first;
    }
    (n + 1..=4 * n)
        .find_map(|m| build(m).ok())
        .ok_or_else(|| first.unwrap_err())
}

fn run_one(spec: &BenchSpec, n: usize) -> Result<BenchRecord, BenchError> {
    // distinct but reproducible inputs per length
    let mut rng = StdRng::seed_from_u64(spec.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let q = RealMatrix::<f32>::random(n, spec.d, &mut rng);
    let k = RealMatrix::<f32>::random(n, spec.d, &mut rng);
    let v = RealMatrix::<f32>::random(n, spec.d, &mut rng);

    let (times, macs) = match spec.kernel {
        Kernel::Dense => {
            if !spec.d.is_multiple_of(spec.heads) {
                return Err(BenchError::Args(format!(
                    "d={} is not divisible by {} heads",
                    spec.d, spec.heads
                )));
            }
            let scale = 1.0 / ((spec.d / spec.heads) as f32).sqrt();
            time(spec, || {
                Ok(multi_head_attention_counted(&q, &k, &v, spec.heads, spec.causal, scale)?.1)
            })?
        }
        Kernel::Dilated => {
            let config = config_for(spec, n)?;
            if spec.world_size > 1 {
                let shards = shard_qkv(&q, &k, &v, spec.world_size)?;
                time(spec, || {
                    Ok(distributed_dilated_forward(&shards, &config)?.measured_macs)
                })?
            } else if spec.pad {
                time(spec, || {
                    Ok(dilated_forward_padded_instrumented(&q, &k, &v, &config)?.1)
                })?
            } else {
                time(spec, || {
                    Ok(dilated_forward_instrumented(&q, &k, &v, &config)?.1)
                })?
            }
        }
    };
    let (med, min, max) = summarize(&times);
    Ok(BenchRecord {
        kernel: spec.kernel,
        n,
        d: spec.d,
        heads: spec.heads,
        world_size: spec.world_size,
        wall_ms_med: med,
        wall_ms_min: min,
        wall_ms_max: max,
        repeats: spec.repeats,
        measured_macs: macs,
        seed: spec.seed,
    })
}

/// Runs `f` for the warmups and timed repeats; returns per-repeat
/// milliseconds and the MAC count, which must not vary between calls.
fn time(
    spec: &BenchSpec,
    f: impl Fn() -> Result<u64, BenchError>,
) -> Result<(Vec<f64>, u64), BenchError> {
    let macs = f()?;
    for _ in 1..spec.warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        let start = Instant::now();
        let m = f()?;
        // clamp so sub-resolution timings still satisfy wall_ms > 0
        times.push((start.elapsed().as_secs_f64() * 1e3).max(1e-6));
        debug_assert_eq!(m, macs);
    }
    Ok((times, macs))
}

/// `(median, min, max)` of a non-empty sample.
pub fn summarize(times: &[f64]) -> (f64, f64, f64) {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let med = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    (med, sorted[0], sorted[m - 1])
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Fitted exponent of median wall time against `n`.
pub fn runtime_exponent(records: &[BenchRecord]) -> Option<f64> {
    fit_exponent(
        &records
            .iter()
            .map(|r| (r.n as f64, r.wall_ms_med))
            .collect::<Vec<_>>(),
    )
}
