use serde::{Deserialize, Serialize};

use crate::dilated::{dilated_forward_instrumented, DilatedConfig, Pattern};
use crate::error::Result;
use crate::tensor_core::RealMatrix;

/// Measured versus modelled attention cost for one `(n, d, config)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub patterns: Vec<(usize, usize)>,
    /// Scalar multiplications in the per-segment `QKᵀ` and `PV` products,
    /// counted inside the kernel during a probe forward pass.
    pub measured_macs: u64,
    /// `Σ_i 2·n·d·w_i / r_i²`
    pub analytic_flops: f64,
    /// `2α/(α−1)·w0·n·d`, only for geometric schedules.
    pub bound: Option<f64>,
    pub exact_match: bool,
}

impl FlopsReport {
    pub fn within_bound(&self) -> Option<bool> {
        self.bound.map(|b| self.measured_macs as f64 <= b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Closed-form cost: `2·n·d·Σ w_i / r_i²`.
pub fn analytic_flops(n: usize, d: usize, patterns: &[Pattern]) -> f64 {
    patterns
        .iter()
        .map(|p| 2.0 * n as f64 * d as f64 * p.segment_len as f64 / (p.dilation as f64).powi(2))
        .sum()
}

/// Upper bound of the geometric schedule cost: `2α/(α−1)·w0·n·d`.
pub fn geometric_bound(w0: usize, alpha: usize, n: usize, d: usize) -> f64 {
    let a = alpha as f64;
    2.0 * a / (a - 1.0) * w0 as f64 * n as f64 * d as f64
}

/// Runs an instrumented forward pass on `[n × d]` zero inputs and compares
/// the counted MACs with the closed form.
///
/// The probe runs without causal masking; the closed form counts unmasked
/// products.
pub fn count_flops(n: usize, d: usize, config: &DilatedConfig) -> Result<FlopsReport> {
    let probe_cfg = config.clone().with_causal(false);
    config.head_dim(d)?;
    config.check_length(n)?;
    let zeros = RealMatrix::<f32>::zeros(n, d);
    let (_, measured_macs) = dilated_forward_instrumented(&zeros, &zeros, &zeros, &probe_cfg)?;
    let analytic = analytic_flops(n, d, config.patterns());
    Ok(FlopsReport {
        n,
        d,
        heads: config.heads(),
        patterns: config
            .patterns()
            .iter()
            .map(|p| (p.segment_len, p.dilation))
            .collect(),
        measured_macs,
        analytic_flops: analytic,
        bound: config
            .geometric_params()
            .map(|g| geometric_bound(g.w0, g.alpha, n, d)),
        exact_match: measured_macs as f64 == analytic,
    })
}
