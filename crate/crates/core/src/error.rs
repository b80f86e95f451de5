use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    Shape {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error for record {id}: {reason}")]
    Record { id: String, reason: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("backbone error: {0}")]
    Backbone(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("tensor file error: {0}")]
    Tensor(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            axis,
            expected,
            actual,
        }
    }
}

pub(crate) fn ensure_shape(axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(axis, expected, actual))
    }
}
