use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detector pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A file on disk could not be decoded.
    #[error("parse error in {}: byte offset {offset}: {message}", file.display())]
    Parse {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    /// The run configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// A forward or backward pass produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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
