//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition or supplied malformed values.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A numeric routine failed (e.g. a factorization that did not converge).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// The planner could not produce a finite-cost plan.
    #[error("planner failure: {0}")]
    Planner(String),
    /// A closed-loop episode was aborted before completing its laps.
    #[error("episode aborted: {0}")]
    Aborted(String),
    /// A file did not match its documented schema.
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors caused by caller input rather than runtime failure.
    /// The CLI maps these to exit code 2.
    pub fn is_invalid_input(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
