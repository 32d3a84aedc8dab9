use thiserror::Error;

use crate::tensor::TensorError;

/// Errors produced by the attention, gradient and training code.
#[derive(Debug, Error)]
pub enum DmaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("dynamic weight overflow at head {head}, key {key}: exponent {exponent} exceeds 700")]
    ParameterOverflow { head: usize, key: usize, exponent: f64 },
    #[error("query row {row} of head {head} has no active key")]
    DegenerateRow { head: usize, row: usize },
    #[error("mask and activations disagree: {0}")]
    Consistency(String),
    #[error("infeasible task spec: {0}")]
    Capacity(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DmaError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> DmaError {
    DmaError::Shape { op, detail: detail.into() }
}
