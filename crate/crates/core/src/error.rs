use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("dangling node reference: {0}")]
    DanglingNode(String),
    #[error("unknown format: {0}")]
    UnknownFormat(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Field {
            path: path.into(),
            message: message.into(),
        }
    }
}
