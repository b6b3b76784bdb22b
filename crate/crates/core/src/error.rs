use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {width}x{height}: {reason}")]
    Dimensions {
        width: usize,
        height: usize,
        reason: &'static str,
    },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("primitive {index} invalid: {reason}")]
    Primitive { index: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("empty mask")]
    EmptyMask,

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
