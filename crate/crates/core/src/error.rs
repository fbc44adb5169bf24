use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("second-order differentiation through `{0}` is not supported")]
    SecondOrderUnsupported(&'static str),

    #[error("crop {height}x{width} is below the critic minimum of {min}x{min}")]
    CropTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("training halted after {aborts} consecutive aborted steps (last: {last})")]
    Halted { aborts: usize, last: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
