use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument that violates an operation's contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("source group `{group}` ({size} records) must be split to reach {n_test} test records")]
    UnsplittableGroup {
        group: String,
        size: usize,
        n_test: usize,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec error for {path:?}: {source}")]
    Image {
        path: Option<PathBuf>,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: Some(path.into()),
            source,
        }
    }

    /// True for errors caused by bad user input, including malformed input
    /// files, rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Shape(_)
                | Error::NotFound(_)
                | Error::UnsplittableGroup { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { path: None, source }
    }
}

impl From<image::ImageError> for Error {
    fn from(source: image::ImageError) -> Self {
        Error::Image { path: None, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
