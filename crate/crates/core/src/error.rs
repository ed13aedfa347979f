use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape mismatch at {layer}: {details}")]
    Shape { layer: String, details: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown emotion label {0:?}")]
    UnknownLabel(String),

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Divergence { iteration: usize },

    #[error("parse error at line {line}: {details}")]
    Parse { line: usize, details: String },

    #[error("missing image file: {0}")]
    MissingImage(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
