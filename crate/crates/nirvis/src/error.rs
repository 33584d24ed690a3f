//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Input contains NaN or infinite entries, or is otherwise unusable.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Cosine similarity of a zero vector is undefined.
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    /// File parsing / serialization problems.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// Experiment configuration problems (missing paths, bad keys).
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage failed; the stage name is preserved for diagnostics.
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    pub fn stage(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            message: message.into(),
        }
    }
}
