//! Exact softmax attention, forward and reverse mode.
//!
//! Logits are `scale · ⟨q_p, k_t⟩`. Every softmax subtracts the row maximum and
//! the normalizer is kept as a log-sum-exp, so rows with very large logit mass
//! never overflow. Positions are carried alongside the rows so that causal
//! masking compares original sequence positions even after rows were gathered.

use crate::error::{Error, Result};
use crate::tensor_core::matrix::{axpy, dot, Real, RealMatrix};

/// Attention output together with per-row softmax normalizers.
///
/// For multi-head results `row_lse` and `covered` are laid out head-major:
/// entry `h * rows + p` belongs to head `h`, row `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult<T: Real = f64> {
    pub output: RealMatrix<T>,
    pub heads: usize,
    /// `log Σ_t exp(logit_pt)`; `-inf` for uncovered rows.
    pub row_lse: Vec<T>,
    /// Whether the row attended to at least one key.
    pub covered: Vec<bool>,
}

impl<T: Real> AttentionResult<T> {
    pub fn rows(&self) -> usize {
        self.output.rows()
    }

    pub fn lse(&self, head: usize, row: usize) -> T {
        self.row_lse[head * self.rows() + row]
    }

    pub fn is_covered(&self, head: usize, row: usize) -> bool {
        self.covered[head * self.rows() + row]
    }

    /// Concatenates single-head results along the feature axis.
    pub fn concat_heads(parts: Vec<AttentionResult<T>>) -> Result<Self> {
        let heads = parts.iter().map(|p| p.heads).sum();
        let outputs: Vec<_> = parts.iter().map(|p| p.output.clone()).collect();
        let output = RealMatrix::hstack(&outputs)?;
        let mut row_lse = Vec::with_capacity(heads * output.rows());
        let mut covered = Vec::with_capacity(heads * output.rows());
        for p in parts {
            row_lse.extend(p.row_lse);
            covered.extend(p.covered);
        }
        Ok(Self {
            output,
            heads,
            row_lse,
            covered,
        })
    }

    /// Concatenates results for consecutive row ranges (same head count).
    pub fn concat_rows(parts: &[AttentionResult<T>]) -> Result<Self> {
        let heads = parts.first().map_or(1, |p| p.heads);
        if parts.iter().any(|p| p.heads != heads) {
            return Err(Error::shape("concat_rows", "head counts differ"));
        }
        let outputs: Vec<_> = parts.iter().map(|p| p.output.clone()).collect();
        let output = RealMatrix::vstack(&outputs)?;
        let mut row_lse = Vec::with_capacity(heads * output.rows());
        let mut covered = Vec::with_capacity(heads * output.rows());
        for h in 0..heads {
            for p in parts {
                let n = p.rows();
                row_lse.extend_from_slice(&p.row_lse[h * n..(h + 1) * n]);
                covered.extend_from_slice(&p.covered[h * n..(h + 1) * n]);
            }
        }
        Ok(Self {
            output,
            heads,
            row_lse,
            covered,
        })
    }
}

/// Gradients with respect to the three attention inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Real = f64> {
    pub q: RealMatrix<T>,
    pub k: RealMatrix<T>,
    pub v: RealMatrix<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(n_q: usize, n_k: usize, d: usize, dv: usize) -> Self {
        Self {
            q: RealMatrix::zeros(n_q, d),
            k: RealMatrix::zeros(n_k, d),
            v: RealMatrix::zeros(n_k, dv),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        Some(
            self.q
                .max_abs_diff(&other.q)?
                .max(self.k.max_abs_diff(&other.k)?)
                .max(self.v.max_abs_diff(&other.v)?),
        )
    }
}

/// `0, 1, …, n-1`
pub fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_inputs<T: Real>(
    op: &'static str,
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    scale: T,
    positions_q: &[usize],
    positions_k: &[usize],
) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(
            op,
            format!("q has {} cols, k has {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            op,
            format!("k has {} rows, v has {}", k.rows(), v.rows()),
        ));
    }
    if positions_q.len() != q.rows() || positions_k.len() != k.rows() {
        return Err(Error::shape(op, "position lists must match row counts"));
    }
    if !(scale > T::zero() && scale.is_finite()) {
        return Err(Error::config(format!(
            "scale must be positive and finite, got {scale}"
        )));
    }
    Ok(())
}

/// Softmax attention of `q` against `(k, v)`.
///
/// With `causal`, key `t` is hidden from query `p` when
/// `positions_k[t] > positions_q[p]`. A query with no visible key is returned
/// as a zero row with `covered = false` and `row_lse = -inf`.
pub fn dense_attention<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    causal: bool,
    scale: T,
    positions_q: &[usize],
    positions_k: &[usize],
) -> Result<AttentionResult<T>> {
    check_inputs("dense_attention", q, k, v, scale, positions_q, positions_k)?;
    Ok(attend(q, k, v, causal, scale, positions_q, positions_k).0)
}

/// Unchecked kernel; also returns the number of multiply-accumulates spent in
/// the two products (logits and probability-weighted values).
pub(crate) fn attend<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    causal: bool,
    scale: T,
    positions_q: &[usize],
    positions_k: &[usize],
) -> (AttentionResult<T>, u64) {
    let (n_q, d) = q.shape();
    let n_k = k.rows();
    let dv = v.cols();
    let mut output = RealMatrix::zeros(n_q, dv);
    let mut row_lse = vec![T::neg_infinity(); n_q];
    let mut covered = vec![false; n_q];
    let mut logits = vec![T::neg_infinity(); n_k];
    let mut macs = 0u64;

    for p in 0..n_q {
        let qp = q.row(p);
        let limit = positions_q[p];
        let mut max = T::neg_infinity();
        let mut visible = 0u64;
        for t in 0..n_k {
            if causal && positions_k[t] > limit {
                logits[t] = T::neg_infinity();
                continue;
            }
            let s = scale * dot(qp, k.row(t));
            logits[t] = s;
            max = max.max(s);
            visible += 1;
        }
        if visible == 0 {
            continue;
        }
        macs += visible * (d + dv) as u64;

        let mut sum = T::zero();
        for l in logits.iter_mut() {
            if *l == T::neg_infinity() {
                // masked: skip the exp, the weight is exactly zero
                *l = T::zero();
                continue;
            }
            *l = (*l - max).exp();
            sum = sum + *l;
        }
        let inv = T::one() / sum;
        let out = output.row_mut(p);
        for (t, &e) in logits.iter().enumerate() {
            if e > T::zero() {
                axpy(e * inv, v.row(t), out);
            }
        }
        row_lse[p] = max + sum.ln();
        covered[p] = true;
    }

    (
        AttentionResult {
            output,
            heads: 1,
            row_lse,
            covered,
        },
        macs,
    )
}

/// Reverse-mode gradient of [`dense_attention`] for upstream `grad_output`.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention_backward<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    causal: bool,
    scale: T,
    positions_q: &[usize],
    positions_k: &[usize],
    grad_output: &RealMatrix<T>,
) -> Result<Gradients<T>> {
    check_inputs(
        "dense_attention_backward",
        q,
        k,
        v,
        scale,
        positions_q,
        positions_k,
    )?;
    if grad_output.shape() != (q.rows(), v.cols()) {
        return Err(Error::shape(
            "dense_attention_backward",
            format!(
                "grad_output is {:?}, expected {:?}",
                grad_output.shape(),
                (q.rows(), v.cols())
            ),
        ));
    }
    let (fwd, _) = attend(q, k, v, causal, scale, positions_q, positions_k);
    let delta = row_dots(grad_output, &fwd.output);
    let mut grads = Gradients::zeros(q.rows(), k.rows(), q.cols(), v.cols());
    backward_with_stats(
        q,
        k,
        v,
        causal,
        scale,
        positions_q,
        positions_k,
        grad_output,
        &fwd.row_lse,
        &delta,
        &mut grads,
    );
    Ok(grads)
}

/// `out[p] = ⟨a_p, b_p⟩`
pub(crate) fn row_dots<T: Real>(a: &RealMatrix<T>, b: &RealMatrix<T>) -> Vec<T> {
    (0..a.rows()).map(|p| dot(a.row(p), b.row(p))).collect()
}

/// Accumulates attention gradients into `grads` given the final row
/// normalizers.
///
/// `row_lse[p]` is the log-normalizer the probabilities are divided by and
/// `delta[p] = ⟨dO_p, O_p⟩` uses the final output. When the keys passed here
/// are only part of the set a row was normalized over (pattern mixing,
/// gathered keys), the accumulated gradients are exactly that part's
/// contribution, so summing over parts gives the full gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_with_stats<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    causal: bool,
    scale: T,
    positions_q: &[usize],
    positions_k: &[usize],
    grad_output: &RealMatrix<T>,
    row_lse: &[T],
    delta: &[T],
    grads: &mut Gradients<T>,
) {
    for p in 0..q.rows() {
        let lse = row_lse[p];
        if lse == T::neg_infinity() {
            continue;
        }
        let qp = q.row(p);
        let go = grad_output.row(p);
        for (t, &pk) in positions_k.iter().enumerate().take(k.rows()) {
            if causal && pk > positions_q[p] {
                continue;
            }
            let kt = k.row(t);
            let prob = (scale * dot(qp, kt) - lse).exp();
            axpy(prob, go, grads.v.row_mut(t));
            let ds = prob * (dot(go, v.row(t)) - delta[p]) * scale;
            axpy(ds, kt, grads.q.row_mut(p));
            axpy(ds, qp, grads.k.row_mut(t));
        }
    }
}

/// Full-sequence attention applied independently to `heads` column slices.
pub fn multi_head_attention<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    heads: usize,
    causal: bool,
    scale: T,
) -> Result<AttentionResult<T>> {
    Ok(multi_head_attention_counted(q, k, v, heads, causal, scale)?.0)
}

/// [`multi_head_attention`] that also returns the multiply-accumulates spent
/// in the `QKᵀ` and `PV` products.
pub fn multi_head_attention_counted<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    heads: usize,
    causal: bool,
    scale: T,
) -> Result<(AttentionResult<T>, u64)> {
    if heads == 0
        || !q.cols().is_multiple_of(heads)
        || q.shape() != k.shape()
        || q.shape() != v.shape()
    {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q/k/v must share a shape whose width divides into {heads} heads"),
        ));
    }
    let dh = q.cols() / heads;
    let pos = positions(q.rows());
    let mut parts = Vec::with_capacity(heads);
    let mut macs = 0;
    for h in 0..heads {
        let (qh, kh, vh) = (
            q.column_block(h * dh, dh),
            k.column_block(h * dh, dh),
            v.column_block(h * dh, dh),
        );
        check_inputs("multi_head_attention", &qh, &kh, &vh, scale, &pos, &pos)?;
        let (r, m) = attend(&qh, &kh, &vh, causal, scale, &pos, &pos);
        macs += m;
        parts.push(r);
    }
    Ok((AttentionResult::concat_heads(parts)?, macs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn m(rows: &[&[f64]]) -> RealMatrix {
        RealMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = m(&[&[0.5, -1.0]]);
        let k = m(&[&[0.5, -1.0]]);
        let v = m(&[&[7.0]]);
        let r = dense_attention(&q, &k, &v, false, 0.3, &[0], &[0]).unwrap();
        assert_eq!(r.output.as_slice(), &[7.0]);
        assert!((r.row_lse[0] - 0.3 * 1.25).abs() < 1e-15);
        assert!(r.covered[0]);
    }

    #[test]
    fn equal_logits_average_values() {
        let q = m(&[&[1.0, 2.0]]);
        let k = m(&[&[3.0, -1.0], &[3.0, -1.0]]);
        let v = m(&[&[1.0, 4.0], &[3.0, 0.0]]);
        let r = dense_attention(&q, &k, &v, false, 1.0, &[0], &[0, 1]).unwrap();
        assert_eq!(r.output.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn fully_masked_row_is_uncovered() {
        let q = m(&[&[1.0]]);
        let k = m(&[&[1.0]]);
        let v = m(&[&[5.0]]);
        let r = dense_attention(&q, &k, &v, true, 1.0, &[0], &[1]).unwrap();
        assert!(!r.covered[0]);
        assert_eq!(r.row_lse[0], f64::NEG_INFINITY);
        assert_eq!(r.output.as_slice(), &[0.0]);
    }

    #[test]
    fn rejects_bad_shapes_and_scale() {
        let a = RealMatrix::<f64>::zeros(2, 3);
        let b = RealMatrix::<f64>::zeros(2, 2);
        let p = positions(2);
        assert!(dense_attention(&a, &b, &b, false, 1.0, &p, &p).is_err());
        assert!(dense_attention(&a, &a, &b.row_block(0, 1), false, 1.0, &p, &p).is_err());
        assert!(dense_attention(&a, &a, &a, false, 1.0, &p, &p[..1]).is_err());
        assert!(matches!(
            dense_attention(&a, &a, &a, false, 0.0, &p, &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let q = m(&[&[100.0]]);
        let k = m(&[&[100.0], &[99.0]]);
        let v = m(&[&[1.0], &[2.0]]);
        let r = dense_attention(&q, &k, &v, false, 1.0, &[0], &[0, 1]).unwrap();
        assert!(r.output.get(0, 0).is_finite());
        assert!((r.row_lse[0] - (10000.0 + (1.0 + (-100.0f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = StdRng::seed_from_u64(5);
        let q = RealMatrix::<f64>::random(4, 3, &mut rng);
        let k = RealMatrix::<f64>::random(5, 3, &mut rng);
        let v = RealMatrix::<f64>::random(5, 2, &mut rng);
        let g = dense_attention_backward(
            &q,
            &k,
            &v,
            false,
            0.5,
            &positions(4),
            &positions(5),
            &RealMatrix::zeros(4, 2),
        )
        .unwrap();
        assert_eq!(g, Gradients::zeros(4, 5, 3, 2));
    }

    #[test]
    fn single_key_grad_v_is_upstream() {
        let q = m(&[&[0.2, 0.1]]);
        let k = m(&[&[-0.4, 0.9]]);
        let v = m(&[&[1.0, 2.0, 3.0]]);
        let go = m(&[&[0.5, -1.5, 2.0]]);
        let g = dense_attention_backward(&q, &k, &v, false, 1.0, &[0], &[0], &go).unwrap();
        assert_eq!(g.v, go);
        // weight is constant 1, so logits receive no gradient
        assert!(g.q.as_slice().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn multi_head_splits_columns() {
        let mut rng = StdRng::seed_from_u64(6);
        let q = RealMatrix::<f64>::random(6, 4, &mut rng);
        let k = RealMatrix::<f64>::random(6, 4, &mut rng);
        let v = RealMatrix::<f64>::random(6, 4, &mut rng);
        let r = multi_head_attention(&q, &k, &v, 2, true, 0.7).unwrap();
        let pos = positions(6);
        let h1 = dense_attention(
            &q.column_block(2, 2),
            &k.column_block(2, 2),
            &v.column_block(2, 2),
            true,
            0.7,
            &pos,
            &pos,
        )
        .unwrap();
        assert_eq!(r.output.column_block(2, 2), h1.output);
        assert_eq!(r.lse(1, 3), h1.row_lse[3]);
    }
}
