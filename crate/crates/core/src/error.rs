use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis}: expected {expected}, got {actual} ({context})")]
    Shape {
        axis: usize,
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("rank mismatch: expected rank {expected}, got {actual} ({context})")]
    Rank {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("batchnorm `{0}` evaluated before any training step populated its running statistics")]
    UninitializedStatistics(String),

    #[error("invalid cache: {0}")]
    InvalidCache(String),

    #[error("inconsistent gradient: {0}")]
    InconsistentGradient(String),

    #[error("numerical failure: non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("descriptor mismatch: {0}")]
    DescriptorMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
