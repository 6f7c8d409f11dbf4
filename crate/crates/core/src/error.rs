use std::path::PathBuf;

use tbnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
