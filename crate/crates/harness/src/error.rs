use lgm_core::LgmError;

#[derive(Debug, Clone, thiserror::Error)]
pub enum HarnessError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    /// Process exit code: 2 for validation errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

impl From<LgmError> for HarnessError {
    fn from(e: LgmError) -> Self {
        if e.is_numerical() {
            HarnessError::Numerical(e.to_string())
        } else {
            HarnessError::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Validation(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Validation(format!("json: {e}"))
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Validation(format!("csv: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Validation(msg.into()))
}
