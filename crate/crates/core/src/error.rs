//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A binary or image file does not match its expected layout.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    /// A text file (calibration, config) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// A dataset root does not follow the expected directory layout.
    #[error("dataset layout error: {0}")]
    DatasetLayout(String),

    /// Tensor or image dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value is outside its documented range.
    #[error("range error: {0}")]
    Range(String),

    /// A configuration or parameter failed validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An input that must be non-degenerate (e.g. no valid pixels) was degenerate.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A documented precondition between modules was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A checkpoint is incompatible with the requested model or data.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
