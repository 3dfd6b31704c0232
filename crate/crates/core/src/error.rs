use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index ({b}, {c}, {y}, {x}) out of range for shape {shape}")]
    Index {
        b: usize,
        c: usize,
        y: usize,
        x: usize,
        shape: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint shape table mismatch: {0}")]
    ShapeTableMismatch(String),

    #[error("quantization error: {0}")]
    Quant(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
