use crate::dilated::config::DilatedConfig;
use crate::dilated::index::{build_index_maps, SparseIndexMap};
use crate::error::{Error, Result};
use crate::tensor_core::{attend, axpy, AttentionResult, Real, RealMatrix};

/// Output of one (pattern, head) scattered back to full sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternOutput<T: Real = f64> {
    /// `N × d`, zero on rows the pattern did not select for this head.
    pub scattered: RealMatrix<T>,
    /// `-inf` on rows the pattern did not select.
    pub row_lse: Vec<T>,
}

impl<T: Real> PatternOutput<T> {
    pub fn empty(n: usize, d: usize) -> Self {
        Self {
            scattered: RealMatrix::zeros(n, d),
            row_lse: vec![T::neg_infinity(); n],
        }
    }
}

/// Dilated attention for a single pattern and head on `[N × d]` inputs.
///
/// Each segment's selected rows are gathered, attended densely (with causal
/// masking on original positions), and scattered back.
pub fn single_pattern_attention<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
    pattern: usize,
    head: usize,
) -> Result<PatternOutput<T>> {
    check_qkv("single_pattern_attention", q, k, v)?;
    let maps = build_index_maps(config, q.rows(), pattern, head)?;
    let scale = T::from_f64(config.scale().resolve(q.cols()));
    let mut macs = 0;
    Ok(attend_maps(
        q,
        k,
        v,
        &maps,
        config.causal(),
        scale,
        q.rows(),
        &mut macs,
    ))
}

pub(crate) fn check_qkv<T: Real>(
    op: &'static str,
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(
            op,
            format!(
                "q {:?}, k {:?}, v {:?} must share a shape",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    if q.rows() == 0 || q.cols() == 0 {
        return Err(Error::shape(op, "empty input"));
    }
    Ok(())
}

/// Attends every map's rows among themselves. Keys at positions `>= key_limit`
/// (padding) are excluded.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_maps<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    maps: &[SparseIndexMap],
    causal: bool,
    scale: T,
    key_limit: usize,
    macs: &mut u64,
) -> PatternOutput<T> {
    let mut out = PatternOutput::empty(q.rows(), v.cols());
    for map in maps {
        let rows = &map.positions;
        let keys: &[usize] = match rows.iter().position(|&p| p >= key_limit) {
            Some(cut) => &rows[..cut],
            None => rows,
        };
        let (res, m) = attend(
            &q.select_rows(rows),
            &k.select_rows(keys),
            &v.select_rows(keys),
            causal,
            scale,
            rows,
            keys,
        );
        *macs += m;
        out.scattered.scatter_rows(rows, &res.output);
        for (i, &p) in rows.iter().enumerate() {
            out.row_lse[p] = res.row_lse[i];
        }
    }
    out
}

/// Combines per-pattern outputs with weights proportional to each pattern's
/// softmax normalizer, computed in log space.
///
/// For row `p`: `α_i = exp(lse_i − M) / Σ_j exp(lse_j − M)` with
/// `M = max_j lse_j`; the combined `row_lse` is `M + log Σ_j exp(lse_j − M)`.
pub fn mix_patterns<T: Real>(outputs: &[PatternOutput<T>]) -> Result<AttentionResult<T>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::shape("mix_patterns", "no pattern outputs"))?;
    let (n, d) = first.scattered.shape();
    if outputs
        .iter()
        .any(|o| o.scattered.shape() != (n, d) || o.row_lse.len() != n)
    {
        return Err(Error::shape(
            "mix_patterns",
            "pattern outputs differ in shape",
        ));
    }
    let mut output = RealMatrix::zeros(n, d);
    let mut row_lse = vec![T::neg_infinity(); n];
    let mut covered = vec![false; n];
    let mut weights = vec![T::zero(); outputs.len()];
    for p in 0..n {
        let max = outputs
            .iter()
            .map(|o| o.row_lse[p])
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (w, o) in weights.iter_mut().zip(outputs) {
            *w = (o.row_lse[p] - max).exp();
            sum = sum + *w;
        }
        let dst = output.row_mut(p);
        for (&w, o) in weights.iter().zip(outputs) {
            if w > T::zero() {
                axpy(w / sum, o.scattered.row(p), dst);
            }
        }
        row_lse[p] = max + sum.ln();
        covered[p] = true;
    }
    Ok(AttentionResult {
        output,
        heads: 1,
        row_lse,
        covered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::{dense_attention, positions};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn qkv(n: usize, d: usize, seed: u64) -> (RealMatrix, RealMatrix, RealMatrix) {
        let mut rng = StdRng::seed_from_u64(seed);
        (
            RealMatrix::random(n, d, &mut rng),
            RealMatrix::random(n, d, &mut rng),
            RealMatrix::random(n, d, &mut rng),
        )
    }

    #[test]
    fn full_segment_equals_dense() {
        let (q, k, v) = qkv(8, 3, 1);
        let cfg = DilatedConfig::new(&[(8, 1)], 1).unwrap();
        let out = single_pattern_attention(&q, &k, &v, &cfg, 0, 0).unwrap();
        let pos = positions(8);
        let dense = dense_attention(&q, &k, &v, false, 1.0 / 3f64.sqrt(), &pos, &pos).unwrap();
        assert_eq!(out.scattered, dense.output);
        assert_eq!(out.row_lse, dense.row_lse);
    }

    #[test]
    fn causal_segment_start_attends_to_itself() {
        let (q, k, v) = qkv(4, 2, 2);
        let cfg = DilatedConfig::new(&[(2, 1)], 1).unwrap().with_causal(true);
        let out = single_pattern_attention(&q, &k, &v, &cfg, 0, 0).unwrap();
        assert_eq!(out.scattered.row(2), v.row(2));
        assert_eq!(out.scattered.row(0), v.row(0));
    }

    #[test]
    fn constant_values_and_scatter_rule() {
        let (q, k, _) = qkv(4, 2, 3);
        let v = RealMatrix::filled(4, 2, 3.5);
        let cfg = DilatedConfig::new(&[(4, 2)], 1).unwrap();
        let out = single_pattern_attention(&q, &k, &v, &cfg, 0, 0).unwrap();
        for p in [0, 2] {
            for &x in out.scattered.row(p) {
                assert!((x - 3.5).abs() < 1e-14);
            }
        }
        assert!(out.scattered.is_zero_row(1) && out.scattered.is_zero_row(3));
        assert_eq!(out.row_lse[1], f64::NEG_INFINITY);
    }

    #[test]
    fn mix_single_pattern_is_identity() {
        let (q, k, v) = qkv(8, 2, 4);
        let cfg = DilatedConfig::new(&[(4, 2)], 1).unwrap();
        let po = single_pattern_attention(&q, &k, &v, &cfg, 0, 0).unwrap();
        let mixed = mix_patterns(std::slice::from_ref(&po)).unwrap();
        assert_eq!(mixed.output, po.scattered);
        assert_eq!(mixed.row_lse, po.row_lse);
        assert_eq!(
            mixed.covered,
            po.row_lse.iter().map(|x| x.is_finite()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn equal_lse_gives_mean() {
        let a = PatternOutput {
            scattered: RealMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            row_lse: vec![0.7],
        };
        let b = PatternOutput {
            scattered: RealMatrix::from_rows(&[vec![3.0, -2.0]]).unwrap(),
            row_lse: vec![0.7],
        };
        let mixed = mix_patterns(&[a, b]).unwrap();
        assert_eq!(mixed.output.as_slice(), &[2.0, 0.0]);
        assert!((mixed.row_lse[0] - (0.7 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn mix_handles_huge_denominators() {
        let a = PatternOutput {
            scattered: RealMatrix::filled(1, 1, 1.0),
            row_lse: vec![900.0],
        };
        let b = PatternOutput {
            scattered: RealMatrix::filled(1, 1, 3.0),
            row_lse: vec![900.0 + 2f64.ln()],
        };
        let mixed = mix_patterns(&[a, b]).unwrap();
        // lse near 900 carries ~1e-13 absolute rounding
        assert!((mixed.output.get(0, 0) - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mix_rejects_mismatch_and_reports_uncovered() {
        let a = PatternOutput::<f64>::empty(2, 2);
        let b = PatternOutput::<f64>::empty(3, 2);
        assert!(mix_patterns(&[a.clone(), b]).is_err());
        assert!(mix_patterns::<f64>(&[]).is_err());
        let mixed = mix_patterns(&[a]).unwrap();
        assert_eq!(mixed.covered, vec![false, false]);
        assert!(mixed.output.as_slice().iter().all(|&x| x == 0.0));
    }
}
