use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        actual: Shape,
    },

    #[error("channel mismatch in {op}: expected {expected}, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("tensor of shape {0} overflows the flat index space")]
    SizeOverflow(Shape),

    #[error("data length {len} does not match shape {shape}")]
    LengthMismatch { shape: Shape, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward called on {0} without a saved forward pass")]
    MissingForward(&'static str),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("unreachable target: {0}")]
    UnreachableTarget(String),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("dataset error in {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("zero-variance channel {0}: correlation undefined")]
    ZeroVariance(usize),

    #[error("benchmark correctness gate failed for {case}: relative error {error:e}")]
    CorrectnessGate { case: String, error: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
