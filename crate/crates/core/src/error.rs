use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("view index {index} out of range (n_views = {n_views})")]
    ViewOutOfRange { index: usize, n_views: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown phantom `{0}`")]
    UnknownPhantom(String),

    #[error("array file {path}: {reason}")]
    ArrayFormat { path: PathBuf, reason: String },

    #[error("array payload {path} truncated at byte {offset} (expected {expected} bytes)")]
    Truncated { path: PathBuf, offset: u64, expected: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
