use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} is {got}, expected {expected}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer `{layer}` collapses the feature map to zero size for input {h}x{w}")]
    DegenerateFeatureMap { layer: String, h: usize, w: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("saved activations do not match this backward call: {0}")]
    StaleActivations(String),

    #[error("padding {padding} on layer `{layer}` violates the floor(p/2) rule for kernel {kernel}")]
    PaddingRule {
        layer: String,
        kernel: usize,
        padding: usize,
    },

    #[error("window {0} lies entirely outside the image")]
    WindowOutside(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parameter slot `{0}` is frozen")]
    FrozenParameter(String),

    #[error("malformed image at byte {offset}: {reason}")]
    Image { offset: usize, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint does not match network: {0}")]
    CheckpointMismatch(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, got: usize, expected: usize) -> Self {
        Error::Shape {
            op,
            dim,
            got,
            expected,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
