//! Dilated attention: segment, sparsify, attend, scatter and mix.
//!
//! The crate is organised in four layers:
//!
//! - [`tensor_core`]: a row-major matrix type and exact dense attention
//!   (forward and backward) used both as a building block and as an oracle.
//! - [`dilated`]: segment/dilation index maps, per-pattern attention,
//!   log-sum-exp weighted mixing across patterns, multi-head offsets and the
//!   matching backward pass.
//! - [`complexity`]: an instrumented MAC counter checked against the closed
//!   form cost model, and the token dependency graph with its diameter.
//! - [`distributed`]: an in-process simulation of sequence-parallel execution
//!   with all-gather of sparsified keys/values and reduce-scatter of their
//!   gradients, recording a communication transcript.

pub mod complexity;
pub mod dilated;
pub mod distributed;
pub mod error;
pub mod tensor_core;

pub use error::{Error, Result};
pub use tensor_core::{AttentionResult, Real, RealMatrix};
