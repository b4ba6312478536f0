use std::path::PathBuf;

use crate::tensor::Dims;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("input height {h} and width {w} must both be multiples of {divisor}")]
    Indivisible { h: usize, w: usize, divisor: usize },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        classes: usize,
    },

    #[error("computation graph was already consumed by an earlier backward pass")]
    GraphConsumed,

    #[error("no computation tape recorded for this value")]
    NoTape,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("tensor `{name}` has dims {found:?}, expected {expected:?}")]
    DimsMismatch {
        name: String,
        expected: Dims,
        found: Dims,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("batch norm `{0}` has no preceding convolution")]
    BnWithoutConv(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
