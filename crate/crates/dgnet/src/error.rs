//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DgError {
    #[error("{op}: {dim} mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward root must be a scalar, got {elems} elements")]
    NonScalarRoot { elems: usize },

    #[error("buffer write from node {from_node} to node {to_node} violates topological order")]
    BufferOrderViolation { from_node: usize, to_node: usize },

    #[error("buffer cell for edge ({from_node},{to_node}) written twice")]
    BufferDoubleWrite { from_node: usize, to_node: usize },

    #[error("row read for node {node} before node {missing_source} completed its writes")]
    BufferReadBeforeWrite { node: usize, missing_source: usize },

    #[error("stage {stage}: no weight supplied for edge ({i},{j})")]
    MissingEdgeWeight { stage: usize, i: usize, j: usize },

    #[error("non-finite loss at step {step} (lr {lr}, max |grad| {max_abs_grad})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        max_abs_grad: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DgError>;
