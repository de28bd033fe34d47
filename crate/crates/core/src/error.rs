use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SnnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SnnError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {path} at byte offset {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SnnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SnnError::Io {
            path: path.into(),
            source,
        }
    }
}
