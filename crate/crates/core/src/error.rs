use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyperparameter or structural setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data (descriptors, metadata rows, labels) failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// An API was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward result contained NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A metric is undefined for the given input (e.g. AUC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Checkpoint container is unreadable or does not match the expected layout.
    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image format error on {path}: {detail}")]
    ImageFormat { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
