use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("coordinate ({x}, {y}, {z}) outside grid of resolution {resolution}")]
    OutOfBounds {
        x: u32,
        y: u32,
        z: u32,
        resolution: u32,
    },

    #[error("point {index} out of bounds: {reason}")]
    PointOutOfBounds { index: usize, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("missing checkpoint parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("obj error: {0}")]
    Obj(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        reason: reason.into(),
    }
}
