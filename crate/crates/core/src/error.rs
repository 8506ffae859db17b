use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {kind} {index} (size {size})")]
    OutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("user {0} has no positive or no negative items")]
    DegenerateUser(usize),

    #[error("no qualifying user: {0}")]
    NoQualifyingUser(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("diagnostic failed: {0}")]
    Diagnostic(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
