//! Benchmark harness and verification runner for the dilated attention
//! kernels.

pub mod record;
pub mod runner;
pub mod verify;

/// Errors surfaced by the harness.
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] dilattn_core::Error),
    #[error("invalid arguments: {0}")]
    Args(String),
    #[error("malformed benchmark output: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
