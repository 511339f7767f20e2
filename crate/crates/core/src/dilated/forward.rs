use crate::dilated::config::DilatedConfig;
use crate::dilated::index::{build_index_maps, SparseIndexMap};
use crate::dilated::pattern::{attend_maps, check_qkv, mix_patterns};
use crate::error::{Error, Result};
use crate::tensor_core::{
    backward_with_stats, row_dots, AttentionResult, Gradients, Real, RealMatrix,
};

/// Multi-head dilated attention on `[N × heads·d]` inputs.
///
/// Head `j` uses offset `j mod r_i` under pattern `i`. Patterns are mixed per
/// head by their softmax normalizers and the head outputs are concatenated
/// along the feature axis.
pub fn dilated_forward<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
) -> Result<AttentionResult<T>> {
    Ok(forward_impl(q, k, v, config, q.rows())?.0)
}

/// [`dilated_forward`] that also returns the multiply-accumulates spent in the
/// per-segment `QKᵀ` and `PV` products.
pub fn dilated_forward_instrumented<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
) -> Result<(AttentionResult<T>, u64)> {
    forward_impl(q, k, v, config, q.rows())
}

/// Like [`dilated_forward`] but accepts any `N`: inputs are zero-padded to a
/// multiple of every segment length, padded positions are excluded as keys,
/// and the padded output rows are dropped.
pub fn dilated_forward_padded<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
) -> Result<AttentionResult<T>> {
    Ok(dilated_forward_padded_instrumented(q, k, v, config)?.0)
}

/// [`dilated_forward_padded`] plus the multiply-accumulate count.
pub fn dilated_forward_padded_instrumented<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
) -> Result<(AttentionResult<T>, u64)> {
    check_qkv("dilated_forward_padded", q, k, v)?;
    let n = q.rows();
    let block = config
        .patterns()
        .iter()
        .fold(1, |acc, p| lcm(acc, p.segment_len));
    let padded = n.div_ceil(block) * block;
    if padded == n {
        return forward_impl(q, k, v, config, n);
    }
    let pad = |m: &RealMatrix<T>| {
        RealMatrix::vstack(&[m.clone(), RealMatrix::zeros(padded - n, m.cols())])
    };
    let (res, macs) = forward_impl(&pad(q)?, &pad(k)?, &pad(v)?, config, n)?;
    Ok((truncate_rows(res, n), macs))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn truncate_rows<T: Real>(res: AttentionResult<T>, n: usize) -> AttentionResult<T> {
    let total = res.rows();
    let mut row_lse = Vec::with_capacity(res.heads * n);
    let mut covered = Vec::with_capacity(res.heads * n);
    for h in 0..res.heads {
        row_lse.extend_from_slice(&res.row_lse[h * total..h * total + n]);
        covered.extend_from_slice(&res.covered[h * total..h * total + n]);
    }
    AttentionResult {
        output: res.output.row_block(0, n),
        heads: res.heads,
        row_lse,
        covered,
    }
}

fn forward_impl<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
    key_limit: usize,
) -> Result<(AttentionResult<T>, u64)> {
    check_qkv("dilated_forward", q, k, v)?;
    let dh = config.head_dim(q.cols())?;
    config.check_length(q.rows())?;
    let scale = T::from_f64(config.scale().resolve(dh));
    let mut macs = 0;
    let mut heads = Vec::with_capacity(config.heads());
    for h in 0..config.heads() {
        let (qh, kh, vh) = head_slices(q, k, v, h, dh);
        let outputs = (0..config.patterns().len())
            .map(|i| {
                let maps = build_index_maps(config, q.rows(), i, h)?;
                Ok(attend_maps(
                    &qh,
                    &kh,
                    &vh,
                    &maps,
                    config.causal(),
                    scale,
                    key_limit,
                    &mut macs,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        heads.push(mix_patterns(&outputs)?);
    }
    Ok((AttentionResult::concat_heads(heads)?, macs))
}

pub(crate) fn head_slices<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    head: usize,
    dh: usize,
) -> (RealMatrix<T>, RealMatrix<T>, RealMatrix<T>) {
    (
        q.column_block(head * dh, dh),
        k.column_block(head * dh, dh),
        v.column_block(head * dh, dh),
    )
}

/// Exact reverse-mode gradient of [`dilated_forward`].
///
/// The mixture is a single softmax over the union (with multiplicity) of all
/// patterns' keys, so each segment's contribution is the standard attention
/// backward evaluated with the mixed row normalizer and mixed output. This
/// includes the dependence of the mixture weights on `q` and `k`.
pub fn dilated_backward<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    config: &DilatedConfig,
    grad_output: &RealMatrix<T>,
) -> Result<Gradients<T>> {
    check_qkv("dilated_backward", q, k, v)?;
    if grad_output.shape() != q.shape() {
        return Err(Error::shape(
            "dilated_backward",
            format!(
                "grad_output is {:?}, expected {:?}",
                grad_output.shape(),
                q.shape()
            ),
        ));
    }
    let (n, width) = q.shape();
    let dh = config.head_dim(width)?;
    config.check_length(n)?;
    let scale = T::from_f64(config.scale().resolve(dh));
    let mut grads = Gradients::zeros(n, n, width, width);
    for h in 0..config.heads() {
        let (qh, kh, vh) = head_slices(q, k, v, h, dh);
        let go = grad_output.column_block(h * dh, dh);
        let maps = (0..config.patterns().len())
            .map(|i| build_index_maps(config, n, i, h))
            .collect::<Result<Vec<_>>>()?;
        let mut unused = 0;
        let outputs: Vec<_> = maps
            .iter()
            .map(|m| attend_maps(&qh, &kh, &vh, m, config.causal(), scale, n, &mut unused))
            .collect();
        let mixed = mix_patterns(&outputs)?;
        let delta = row_dots(&go, &mixed.output);
        let mut gh = Gradients::zeros(n, n, dh, dh);
        for map in maps.iter().flatten() {
            segment_backward(
                &qh,
                &kh,
                &vh,
                &go,
                map,
                config.causal(),
                scale,
                &mixed.row_lse,
                &delta,
                &mut gh,
            );
        }
        grads.q.set_column_block(h * dh, &gh.q);
        grads.k.set_column_block(h * dh, &gh.k);
        grads.v.set_column_block(h * dh, &gh.v);
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn segment_backward<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    grad_output: &RealMatrix<T>,
    map: &SparseIndexMap,
    causal: bool,
    scale: T,
    row_lse: &[T],
    delta: &[T],
    grads: &mut Gradients<T>,
) {
    let rows = &map.positions;
    let lse: Vec<T> = rows.iter().map(|&p| row_lse[p]).collect();
    let dl: Vec<T> = rows.iter().map(|&p| delta[p]).collect();
    let m = rows.len();
    let mut local = Gradients::zeros(m, m, q.cols(), v.cols());
    backward_with_stats(
        &q.select_rows(rows),
        &k.select_rows(rows),
        &v.select_rows(rows),
        causal,
        scale,
        rows,
        rows,
        &grad_output.select_rows(rows),
        &lse,
        &dl,
        &mut local,
    );
    grads.q.scatter_add_rows(rows, &local.q);
    grads.k.scatter_add_rows(rows, &local.k);
    grads.v.scatter_add_rows(rows, &local.v);
}
