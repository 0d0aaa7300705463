//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data (CSV rows, config files, label files).
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A precondition or configuration invariant was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor or batch shapes do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A pipeline stage was run before its prerequisite artifact exists.
    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    /// Checkpoint version or fingerprint does not match expectations.
    #[error("incompatible artifact: {0}")]
    IncompatibleArtifact(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
