use thiserror::Error;

pub type Result<T> = std::result::Result<T, MbdError>;

#[derive(Debug, Error)]
pub enum MbdError {
    #[error("index {index} out of range for {len} parameters")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("validation: {0}")]
    Validation(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: String },
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("format: {0}")]
    Format(String),
    #[error("privacy: {0}")]
    Privacy(String),
    #[error("certificate: {0}")]
    Certificate(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MbdError {
    pub fn validation(msg: impl Into<String>) -> Self {
        MbdError::Validation(msg.into())
    }
}
