//! Crate-wide error type. Fallible constructors return `Result`; numeric
//! kernels panic on shape bugs only when the caller already validated shapes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid architecture at layer {layer}: {reason}")]
    InvalidArch { layer: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("idx parse error at byte {offset}: {reason}")]
    Idx { offset: u64, reason: String },

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainAbort { epoch: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
