use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank-{rank} tensor in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },

    #[error("batch norm over an empty batch")]
    EmptyBatch,

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("{0} requires a scalar, got shape {1:?}")]
    NotScalar(&'static str, Vec<usize>),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("unknown model parameter `{0}`")]
    UnknownParam(String),

    #[error("k-NN needs at least {required} valid prototypes, got {available}")]
    TooFewPrototypes { required: usize, available: usize },

    #[error("all prototypes are invalid")]
    NoValidPrototypes,

    #[error("input {height}x{width} is not divisible by 32; pad or resize the image first")]
    NotDivisible { height: usize, width: usize },

    #[error("feature map {height}x{width} too small for the reliance network; needs at least {min}x{min} (input >= {} px)", min * 8)]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("ground-truth mask is not binary (found value {0})")]
    NonBinaryMask(f32),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint is truncated ({0})")]
    Truncated(String),

    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),

    #[error("checkpoint was trained at {saved}px but config requests {requested}px")]
    ResolutionMismatch { saved: usize, requested: usize },

    #[error("checkpoint config incompatible: {0}")]
    Incompatible(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
