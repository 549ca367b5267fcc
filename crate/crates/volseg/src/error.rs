use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolsegError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl VolsegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VolsegError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, VolsegError>;
