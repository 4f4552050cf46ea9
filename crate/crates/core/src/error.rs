use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes, sizes or ranges that violate an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An operation was called on a value that is not ready for it.
    #[error("invalid state: {0}")]
    InvalidState(String),
    /// A NaN or infinity reached a place that requires finite numbers.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A comparison against a reference that carries no information (e.g. a zero gradient).
    #[error("undefined reference: {0}")]
    UndefinedReference(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
