use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] saros_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    ConfigParse { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: checkpoint is {checkpoint}, dataset is {dataset}")]
    ShapeMismatch { checkpoint: String, dataset: String },

    #[error("diagnostic check failed; see {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    DiagnosticsFailed(Vec<PathBuf>),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
