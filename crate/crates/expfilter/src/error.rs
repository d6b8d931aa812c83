//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied values failed.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    /// Symbolic closure exceeded its term budget.
    #[error("closure budget of {budget} specs exceeded ({discovered} discovered)")]
    BudgetExceeded { budget: usize, discovered: usize },

    /// Configuration file could not be parsed or is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
