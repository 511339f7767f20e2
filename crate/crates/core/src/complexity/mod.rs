//! Cost and reachability analyzers for dilated attention.
//!
//! [`count_flops`] counts multiply-accumulates inside the kernel and compares
//! them with `2·n·d·Σ w_i/r_i²`; [`max_path_length`] measures how many
//! attention layers are needed for information to cross the sequence.

mod flops;
mod paths;

pub use flops::{analytic_flops, count_flops, geometric_bound, FlopsReport};
pub use paths::{
    max_path_length, max_path_length_with, path_length_bound, DependencyGraph, PathLength,
    PathOptions,
};
