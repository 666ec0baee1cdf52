use thiserror::Error;

/// Why a gain could not be certified or produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityFailure {
    /// The closed loop has no well-conditioned eigenbasis.
    Defective,
    /// Spectral radius of the closed loop is at least one.
    Unstable,
    /// The Riccati recursion did not reach a fixed point.
    Unstabilizable,
    /// Certified, but looser than the requested `(kappa, gamma)`.
    OutsideRequested,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("stability certification failed: {0:?}")]
    Stability(StabilityFailure),
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("index {index} out of range {lo}..={hi} in {context}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        lo: usize,
        hi: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("closed-form surrogate requires a quadratic-family cost")]
    NonQuadraticCost,
    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::DimensionMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
