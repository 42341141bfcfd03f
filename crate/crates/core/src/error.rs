use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A caller broke an operation's preconditions (shape mismatch, id mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient encountered in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss component `{component}` at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, component: String },

    #[error("model not initialized: {0}")]
    NotInitialized(String),

    #[error("operation unavailable in {mode} mode: {reason}")]
    Mode { mode: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in entry `{entry}`: {reason}")]
    Ingestion { entry: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
