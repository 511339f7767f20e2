use crate::error::{Error, Result};
use crate::tensor_core::{matmul, Real, RealMatrix};

/// One virtual device's contiguous slice of the sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceShard<T: Real = f64> {
    pub rank: usize,
    pub world_size: usize,
    pub local_len: usize,
    /// Global position of local row 0 (`rank · local_len`).
    pub global_offset: usize,
    /// Input rows before projection; absent when the shard was built from
    /// already projected `Q, K, V`.
    pub x_local: Option<RealMatrix<T>>,
    pub q: RealMatrix<T>,
    pub k: RealMatrix<T>,
    pub v: RealMatrix<T>,
}

impl<T: Real> DeviceShard<T> {
    pub fn global_positions(&self) -> std::ops::Range<usize> {
        self.global_offset..self.global_offset + self.local_len
    }
}

/// Splits `m` into `world_size` equal row blocks.
pub fn split_rows<T: Real>(m: &RealMatrix<T>, world_size: usize) -> Result<Vec<RealMatrix<T>>> {
    if world_size == 0 || !m.rows().is_multiple_of(world_size) {
        return Err(Error::config(format!(
            "world size {world_size} does not divide sequence length {}",
            m.rows()
        )));
    }
    let l = m.rows() / world_size;
    Ok((0..world_size).map(|r| m.row_block(r * l, l)).collect())
}

/// Splits `x` along the sequence and projects each slice with replicated
/// weights: `Q_i = X_i·W_Q`, `K_i = X_i·W_K`, `V_i = X_i·W_V`.
pub fn shard_and_project<T: Real>(
    x: &RealMatrix<T>,
    wq: &RealMatrix<T>,
    wk: &RealMatrix<T>,
    wv: &RealMatrix<T>,
    world_size: usize,
) -> Result<Vec<DeviceShard<T>>> {
    let parts = split_rows(x, world_size)?;
    let l = x.rows() / world_size;
    parts
        .into_iter()
        .enumerate()
        .map(|(rank, xi)| {
            Ok(DeviceShard {
                rank,
                world_size,
                local_len: l,
                global_offset: rank * l,
                q: matmul(&xi, wq)?,
                k: matmul(&xi, wk)?,
                v: matmul(&xi, wv)?,
                x_local: Some(xi),
            })
        })
        .collect()
}

/// Shards already projected `Q, K, V`.
pub fn shard_qkv<T: Real>(
    q: &RealMatrix<T>,
    k: &RealMatrix<T>,
    v: &RealMatrix<T>,
    world_size: usize,
) -> Result<Vec<DeviceShard<T>>> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape("shard_qkv", "q, k, v must share a shape"));
    }
    let (qs, ks, vs) = (
        split_rows(q, world_size)?,
        split_rows(k, world_size)?,
        split_rows(v, world_size)?,
    );
    let l = q.rows() / world_size;
    Ok(qs
        .into_iter()
        .zip(ks)
        .zip(vs)
        .enumerate()
        .map(|(rank, ((q, k), v))| DeviceShard {
            rank,
            world_size,
            local_len: l,
            global_offset: rank * l,
            x_local: None,
            q,
            k,
            v,
        })
        .collect())
}
