use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the retriever pipeline.
#[derive(Debug, Error)]
pub enum ClsrError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("degenerate vector at index {index}")]
    DegenerateVector { index: usize },

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error in {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("internal assertion failed: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ClsrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClsrError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the library itself rather than by its inputs.
    pub fn is_internal(&self) -> bool {
        matches!(self, ClsrError::Internal(_) | ClsrError::NonFinite(_))
    }
}

pub type Result<T, E = ClsrError> = std::result::Result<T, E>;
