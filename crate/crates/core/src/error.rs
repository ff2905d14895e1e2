use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Arguments have the wrong shape or are outside the accepted domain.
    InvalidInput(String),
    /// An operation was called on a value that has not reached the required state.
    PreconditionViolation(String),
    /// A frame index lies outside the temporal window it was resolved against.
    OutOfWindow { t: usize, lo: usize, hi: usize },
    /// The optimizer saw a NaN or infinite gradient; the step was not applied.
    NonFiniteGradient { param: &'static str, index: usize },
    /// A parameter array that must stay frozen received a nonzero gradient.
    FrozenLeak { param: &'static str },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::PreconditionViolation(msg) => write!(f, "precondition violated: {msg}"),
            Error::OutOfWindow { t, lo, hi } => {
                write!(f, "frame {t} is outside the window [{lo}, {hi}]")
            }
            Error::NonFiniteGradient { param, index } => {
                write!(f, "non-finite gradient in {param}[{index}]")
            }
            Error::FrozenLeak { param } => write!(f, "frozen parameter {param} received a gradient"),
        }
    }
}

impl core::error::Error for Error {}
