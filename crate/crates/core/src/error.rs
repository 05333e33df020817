use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    Dimension { op: &'static str, detail: String },
    /// An argument is outside its documented domain.
    Argument(String),
    /// The operation was called in the wrong state (missing cache, BN mode, ...).
    State(String),
    /// A value turned non-finite.
    Evaluation(String),
    /// Training loss exceeded the divergence guard.
    Divergence { step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Evaluation(msg) => write!(f, "evaluation error: {msg}"),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss:e})")
            }
        }
    }
}

impl core::error::Error for Error {}
