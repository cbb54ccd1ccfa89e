use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FurnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FurnError {
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("image too small: {height}x{width} (minimum {min})")]
    DegenerateImage { height: usize, width: usize, min: usize },
    #[error("invalid output dimensions {height}x{width}")]
    InvalidDims { height: usize, width: usize },
    #[error("size {size} is not divisible by scale {scale}")]
    IndivisibleSize { size: usize, scale: usize },
    #[error("split `{0}` has no entries")]
    EmptySplit(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing weight file: {0}")]
    MissingWeightFile(PathBuf),
    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: String, actual: String },
    #[error("unknown tap `{0}`")]
    UnknownTap(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown variant `{0}` (expected one of ridb, ridb-rals, ridb-se, full)")]
    UnknownVariant(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FurnError {
    /// Stable identifier used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            FurnError::UnreadableFile { .. } => "UnreadableFile",
            FurnError::UnsupportedFormat { .. } => "UnsupportedFormat",
            FurnError::DegenerateImage { .. } => "DegenerateImage",
            FurnError::InvalidDims { .. } => "InvalidDims",
            FurnError::IndivisibleSize { .. } => "IndivisibleSize",
            FurnError::EmptySplit(_) => "EmptySplit",
            FurnError::ShapeMismatch(_) => "ShapeMismatch",
            FurnError::MissingWeightFile(_) => "MissingWeightFile",
            FurnError::SizeMismatch { .. } => "SizeMismatch",
            FurnError::UnknownTap(_) => "UnknownTap",
            FurnError::InvalidConfig(_) => "InvalidConfig",
            FurnError::ChannelMismatch { .. } => "ChannelMismatch",
            FurnError::WidthMismatch { .. } => "WidthMismatch",
            FurnError::EmptyBatch => "EmptyBatch",
            FurnError::UnknownVariant(_) => "UnknownVariant",
            FurnError::NonFiniteLoss { .. } => "NonFiniteLoss",
            FurnError::TooSmall { .. } => "TooSmall",
            FurnError::Io(_) => "IoError",
            FurnError::Json(_) => "JsonError",
        }
    }

    pub(crate) fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        FurnError::Io(format!("{context}: {err}"))
    }
}

impl From<std::io::Error> for FurnError {
    fn from(err: std::io::Error) -> Self {
        FurnError::Io(err.to_string())
    }
}
