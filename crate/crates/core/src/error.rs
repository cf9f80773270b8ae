//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid control polygon: {0}")]
    InvalidPolygon(String),

    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("forward/backward sample sets do not match: {0}")]
    SampleSetMismatch(String),

    #[error("non-finite gradient in {channel} at vertex {vertex}")]
    NonFiniteGradient { channel: String, vertex: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("images too small for MS-SSIM: need at least {min}x{min}, got {width}x{height}")]
    MsSsimTooSmall {
        min: usize,
        width: usize,
        height: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
