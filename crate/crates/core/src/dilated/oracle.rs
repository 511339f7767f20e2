//! Brute-force reference for mixed dilated attention.
//!
//! Mixing patterns by their softmax normalizers is the same as one softmax
//! over every key a query reaches, counted once per pattern that reaches it.
//! This module enumerates that multiset directly from position arithmetic, with
//! no index maps, gathering, scattering or log-space mixing, so it can check
//! [`crate::dilated::dilated_forward`] independently.

use crate::dilated::config::DilatedConfig;
use crate::error::{Error, Result};
use crate::tensor_core::{Real, RealMatrix};

/// Whether position `pos` is kept by a pattern `(w, r)` for head offset `s`.
fn selected(pos: usize, w: usize, r: usize, s: usize) -> bool {
    let rel = pos % w;
    rel >= s && (rel - s).is_multiple_of(r)
}

/// Key positions (with multiplicity) that `(head, row)` attends to.
pub fn attended_keys(config: &DilatedConfig, n: usize, head: usize, row: usize) -> Vec<usize> {
    let mut keys = Vec::new();
    for p in config.patterns() {
        let (w, r) = (p.segment_len, p.dilation);
        let s = head % r;
        if !selected(row, w, r, s) {
            continue;
        }
        let start = row / w * w;
        for t in start..(start + w).min(n) {
            if selected(t, w, r, s) && !(config.causal() && t > row) {
                keys.push(t);
            }
        }
    }
    keys
}

/// `O(N²)` reference output for `[N × heads·d]` inputs.
pub fn gathered_softmax_oracle<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
) -> Result<RealMatrix<T>> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(
            "gathered_softmax_oracle",
            "q, k, v must share a shape",
        ));
    }
    let (n, width) = q.shape();
    let dh = config.head_dim(width)?;
    config.check_length(n)?;
    let scale = config.scale().resolve(dh);
    let mut out = RealMatrix::zeros(n, width);
    for h in 0..config.heads() {
        let cols = h * dh..(h + 1) * dh;
        for p in 0..n {
            let keys = attended_keys(config, n, h, p);
            if keys.is_empty() {
                continue;
            }
            let logits: Vec<f64> = keys
                .iter()
                .map(|&t| {
                    let s: f64 = cols
                        .clone()
                        .map(|c| q.get(p, c).to_f64() * k.get(t, c).to_f64())
                        .sum();
                    scale * s
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                let acc: f64 = keys
                    .iter()
                    .zip(&weights)
                    .map(|(&t, w)| w * v.get(t, c).to_f64())
                    .sum();
                out.set(p, c, T::from_f64(acc / total));
            }
        }
    }
    Ok(out)
}
