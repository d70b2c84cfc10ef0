//! Crate-wide error type.

use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Instance or configuration parameters violate a documented precondition.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    /// An input polynomial, trace, or observation is malformed for the instance.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A request exceeds a documented enumeration or budget guard.
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    /// An internal numerical invariant failed (e.g. a message normalized to zero).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
