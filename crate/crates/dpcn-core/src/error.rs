//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("convolution kernel dims must be odd, got {kh}x{kw}")]
    NonOddKernel { kh: usize, kw: usize },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("mask sums below epsilon, nothing to pool")]
    EmptyMask,

    #[error("no foreground positions to extract")]
    EmptyForeground,

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("unsupported matching window {dh}x{dw}")]
    UnsupportedWindow { dh: usize, dw: usize },

    #[error("non-finite value constructed in {0}")]
    NonFinite(String),

    #[error("could not render class {class_id} within the foreground-fraction bounds")]
    DegenerateGeometry { class_id: usize },

    #[error("class pool for the requested phase is empty")]
    EmptyPool,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("bad config: {0}")]
    Config(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
