//! Crate-wide error types.

use thiserror::Error;

/// Errors raised by tensor kernels and the differentiation tape.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: id {id} out of range for table with {rows} rows")]
    Index { id: usize, rows: usize },
    #[error("degenerate mask: slice {slice} along axis {axis} has no unmasked entry")]
    DegenerateMask { axis: usize, slice: usize },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Errors raised by the data pipeline, model assembly, and CLI-facing layers.
#[derive(Error, Debug)]
pub enum CareError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown emotion label '{label}'; valid labels: {valid}")]
    Label { label: String, valid: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocab hash mismatch: checkpoint {expected} vs corpus {actual}")]
    VocabMismatch { expected: String, actual: String },
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CareError>;
pub type TensorResult<T> = std::result::Result<T, TensorError>;
