//! Error type shared by the library.

use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by model construction, estimation, and pricing.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension bookkeeping failed (mismatched matrix or panel shapes).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input data failed validation (see [`crate::model::validate_model`]).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The dividend-recursion linearization is undefined for these values
    /// (requires a positive expected dividend yield for paying companies).
    #[error("linearization domain violation: {0}")]
    Linearization(String),

    /// A matrix that must be (semi-)definite or invertible was not.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A lognormal pricing formula received a nonpositive variance.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// Estimation aborted (e.g. the likelihood decreased beyond tolerance).
    #[error("estimation failure: {0}")]
    Estimation(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
