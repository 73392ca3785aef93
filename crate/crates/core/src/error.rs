use thiserror::Error;

/// Errors raised across the controller, simulator and trainer.
#[derive(Debug, Error)]
pub enum NcapError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite parameter value {value} ({context})")]
    CorruptedParameter { value: f64, context: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("simulation diverged at physics step {step}")]
    Diverged { step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NcapError>;

impl NcapError {
    pub(crate) fn dim(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        NcapError::Dimension {
            expected,
            actual,
            context: context.into(),
        }
    }

    /// Errors caused by the inputs rather than by running them.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            NcapError::Config(_)
                | NcapError::Dimension { .. }
                | NcapError::Unsupported(_)
                | NcapError::Checkpoint(_)
                | NcapError::Json(_)
        )
    }
}
