use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint checksum mismatch in {path}")]
    ChecksumMismatch { path: PathBuf },
    #[error("class count mismatch: checkpoint has {checkpoint}, expected {expected}")]
    ClassCountMismatch { checkpoint: usize, expected: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Process exit code for the CLI: 2 config/usage, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ClassCountMismatch { .. } => 2,
            Error::Numerical(_) | Error::Tensor(_) => 3,
            Error::Io { .. } | Error::Format { .. } | Error::ChecksumMismatch { .. } | Error::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
