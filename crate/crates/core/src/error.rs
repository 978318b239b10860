//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Caller-supplied value is out of range or otherwise unusable.
    #[error("input error: {0}")]
    Input(String),

    /// A file or byte stream does not follow its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A referenced node, tensor, or record does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Not enough data to produce the requested result.
    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
