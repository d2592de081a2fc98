use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Error)]
pub enum LgmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not positive definite (pivot {pivot} at position {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("factorization failed after jitter {jitter:e}: {reason}")]
    Factorization { jitter: f64, reason: String },

    #[error("no convergence in {what} after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("unknown hyperparameter binding `{0}`")]
    UnknownHyper(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("size overflow: {0}")]
    Overflow(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LgmError {
    /// True for failures of the numerical machinery (as opposed to malformed inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LgmError::NotPositiveDefinite { .. }
                | LgmError::Factorization { .. }
                | LgmError::NonConvergence { .. }
                | LgmError::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, LgmError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LgmError::InvalidInput(msg.into()))
}
