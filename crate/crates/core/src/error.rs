//! Error types shared across the codec.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("decode error at frame {frame}: {reason}")]
    Decode { frame: usize, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

impl CodecError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CodecError::Shape(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        CodecError::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CodecError::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        CodecError::Domain(msg.into())
    }

    pub fn decode(frame: usize, reason: impl Into<String>) -> Self {
        CodecError::Decode { frame, reason: reason.into() }
    }
}
