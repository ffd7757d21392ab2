use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the model, its numerical kernels and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("{role} is not positive definite (factorisation failed after {attempts} attempts, last jitter {last_jitter:e})")]
    Singular {
        role: String,
        attempts: usize,
        last_jitter: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for {context} (size {size})")]
    OutOfRange {
        context: String,
        index: usize,
        size: usize,
    },

    #[error("non-finite value in {block}: {detail}")]
    NonFinite { block: String, detail: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
