use thiserror::Error;

pub type Result<T> = std::result::Result<T, PseError>;

#[derive(Debug, Error)]
pub enum PseError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing enrollment for speaker {0}")]
    MissingEnrollment(String),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl PseError {
    /// Errors caused by the caller's configuration rather than by a runtime fault.
    pub fn is_config_error(&self) -> bool {
        matches!(self, PseError::Config(_) | PseError::Json(_))
    }
}
