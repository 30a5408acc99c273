use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AbsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AbsaError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} at index {index} is outside 0..3")]
    Label { index: usize, label: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid record {index} (line {line}): {message}")]
    Validation { index: usize, line: usize, message: String },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("lookup error: no entry named {0:?}")]
    Lookup(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AbsaError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        AbsaError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AbsaError::Io {
            path: path.into(),
            source,
        }
    }
}
