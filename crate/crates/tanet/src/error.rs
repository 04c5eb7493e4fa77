//! Crate-wide error type.

use crate::shape::Shape;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible; the message names both shapes.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("masked softmax: every entry is masked out, nothing to normalize")]
    AllMasked,

    #[error("parameter {0:?} not found in store")]
    UnknownParam(String),

    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),

    #[error("parameter {0:?} has no gradient; run backward first")]
    MissingGrad(String),

    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("loss is not finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {detail}")]
    Image { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
