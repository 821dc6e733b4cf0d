use thiserror::Error;

/// Errors produced by the numeric kernels, tensors, layers and file codecs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid quantizer config: {0}")]
    InvalidConfig(String),

    #[error("negative value {0} passed to an unsigned quantizer")]
    NegativeUnsigned(f64),

    #[error("fixed-point overflow: {0}")]
    Overflow(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("layer {0} has no weights")]
    MissingWeights(usize),

    #[error("missing parameter: {0}")]
    MissingParam(String),

    #[error("non-finite value detected: {0}")]
    NonFinite(String),

    #[error("malformed file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn overflow(msg: impl Into<String>) -> Self {
        Error::Overflow(msg.into())
    }
}
