use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize: {0}")]
    Normalize(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient tape: {0}")]
    Tape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("infeasible assignment: {0}")]
    Infeasible(String),
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("invalid assignment matrix: {0}")]
    Assignment(String),
    #[error("queue capacity exceeded: {0}")]
    Capacity(String),
    #[error("diagnostics unavailable: {0}")]
    Diagnostics(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("episode sampling: {0}")]
    Episode(String),
    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
