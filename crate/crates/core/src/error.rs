use thiserror::Error;

/// Errors raised by the tensor engine and the layers built on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel size must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("circular padding of {amount} exceeds spatial size {size}")]
    PaddingTooLarge { amount: usize, size: usize },
    #[error("basis matrix is numerically singular (condition number {0:.3e})")]
    SingularBasis(f64),
    #[error("backward requested for a value that was not recorded on the tape")]
    NotRecorded,
    #[error("layer correspondence: {0}")]
    Correspondence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
