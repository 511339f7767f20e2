use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dilated::DilatedConfig;
use crate::distributed::fabric::{CommTranscript, Phase};
use crate::distributed::shard::shard_qkv;
use crate::distributed::sim::distributed_dilated_forward;
use crate::error::Result;
use crate::tensor_core::RealMatrix;

/// One simulated forward run to summarize.
#[derive(Clone, Debug)]
pub struct CommRun {
    pub n: usize,
    pub world_size: usize,
    pub patterns: Vec<(usize, usize)>,
    pub transcript: CommTranscript,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRow {
    pub n: usize,
    pub world_size: usize,
    pub pattern: usize,
    pub segment_len: usize,
    pub dilation: usize,
    /// Assembled key elements per device; `None` when devices disagree.
    pub gathered_per_device: Option<u64>,
    pub total_sent: u64,
    pub total_received: u64,
    /// `w0·d` for gathered patterns with `w / r == w0`.
    pub expected: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommReport {
    pub w0: usize,
    pub d: usize,
    pub rows: Vec<CommRow>,
}

impl CommReport {
    /// Every gathered pattern with ratio `w0` moved exactly `w0·d` key
    /// elements per device, whatever the sequence length.
    pub fn is_constant(&self) -> bool {
        self.rows.iter().all(|r| match r.expected {
            Some(e) => r.gathered_per_device == Some(e),
            None => r.gathered_per_device.is_some(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-pattern gather volumes of each run. `d` is the full model width
/// (all heads).
pub fn communication_report(runs: &[CommRun], w0: usize, d: usize) -> CommReport {
    let mut rows = Vec::new();
    for run in runs {
        for (i, &(w, r)) in run.patterns.iter().enumerate() {
            let recs: Vec<_> = run
                .transcript
                .phase(Phase::Gather)
                .filter(|x| x.pattern == i)
                .collect();
            let first = recs.first().map_or(0, |x| x.gathered_elements);
            let uniform = recs.iter().all(|x| x.gathered_elements == first);
            let gathered = first > 0;
            rows.push(CommRow {
                n: run.n,
                world_size: run.world_size,
                pattern: i,
                segment_len: w,
                dilation: r,
                gathered_per_device: uniform.then_some(first),
                total_sent: recs.iter().map(|x| x.elements_sent).sum(),
                total_received: recs.iter().map(|x| x.elements_received).sum(),
                expected: (gathered && w % r == 0 && w / r == w0).then_some((w0 * d) as u64),
            });
        }
    }
    CommReport { w0, d, rows }
}

/// Runs the geometric schedule `(w0, alpha)` at every `n` on random inputs
/// and summarizes the traffic.
pub fn communication_sweep(
    w0: usize,
    alpha: usize,
    d: usize,
    heads: usize,
    world_size: usize,
    n_values: &[usize],
    seed: u64,
) -> Result<CommReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let config = DilatedConfig::geometric(w0, alpha, n)?.with_heads(heads)?;
        let q = RealMatrix::<f64>::random(n, d, &mut rng);
        let k = RealMatrix::random(n, d, &mut rng);
        let v = RealMatrix::random(n, d, &mut rng);
        let out = distributed_dilated_forward(&shard_qkv(&q, &k, &v, world_size)?, &config)?;
        runs.push(CommRun {
            n,
            world_size,
            patterns: config
                .patterns()
                .iter()
                .map(|p| (p.segment_len, p.dilation))
                .collect(),
            transcript: out.transcript,
        });
    }
    Ok(communication_report(&runs, w0, d))
}
