use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    #[error("dimension error on axis `{axis}`: {message}")]
    Dimension { axis: &'static str, message: String },

    /// A model or run configuration that cannot be constructed.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input values outside an operation's domain (class ids, counts, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed binary payload; `offset` is the byte position of the failure.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(axis: &'static str, message: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied input rather than by a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. } | Error::Config(_) | Error::Validation(_)
        )
    }
}
