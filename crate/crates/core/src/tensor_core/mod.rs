//! Matrix carrier and exact dense attention kernels.

mod attention;
mod matrix;

pub(crate) use attention::{attend, backward_with_stats, row_dots};
pub use attention::{
    dense_attention, dense_attention_backward, multi_head_attention, multi_head_attention_counted,
    positions, AttentionResult, Gradients,
};
pub use matrix::{axpy, dot, matmul, Real, RealMatrix};
