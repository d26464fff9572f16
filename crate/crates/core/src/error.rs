use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: run `attrib-bench {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("insufficient data: {0}")]
    Starved(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::MissingArtifact { .. }
            | Error::Starved(_) => 2,
            Error::Format(_) | Error::Truncated(_) | Error::Version(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
            Error::Shape(_) | Error::Io(_) | Error::Image(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
