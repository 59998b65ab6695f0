use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid config `{key}`: {message}")]
    Config { key: String, message: String },

    /// A caller broke a documented precondition (shape mismatch, index out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bad {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    NonFinite { epoch: usize, message: String },

    #[error("{0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
