use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("step size {h} ns too coarse; need h <= {required} ns")]
    StepTooCoarse { h: f64, required: f64 },

    #[error("state invariant violated at t = {time} ns: {reason}")]
    InvariantBreach { time: f64, reason: String },

    #[error("envelope cannot be normalized: {0}")]
    NotNormalizable(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("convergence study failed: {0}")]
    Convergence(String),

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
