use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("digit of side {side} does not fit a {frame}x{frame} frame")]
    DigitTooLarge { side: usize, frame: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("missing frame {0}")]
    MissingFrame(PathBuf),
    #[error("no sequences under {0}")]
    NoSequences(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] scalesiam_core::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SimError {
    let path = path.into();
    move |source| SimError::Io { path, source }
}
