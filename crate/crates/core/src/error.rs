use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("degenerate interval r = t = {0}")]
    DegenerateInterval(f64),

    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: String, reason: String },

    #[error("solver diverged at step {step}")]
    Divergence { step: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
