use thiserror::Error;

/// Errors produced by the core library.
#[derive(Error, Debug)]
pub enum GpoError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid domain value in {context}: {message}")]
    Domain { context: String, message: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("numerical fault at stage {stage}: {message}")]
    NumericalFault { stage: usize, message: String },

    #[error("configuration error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor format error: {0}")]
    TensorFormat(String),
}

pub type Result<T> = std::result::Result<T, GpoError>;

impl GpoError {
    pub fn shape(context: &str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        GpoError::Shape {
            context: context.to_string(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn domain(context: &str, message: impl Into<String>) -> Self {
        GpoError::Domain {
            context: context.to_string(),
            message: message.into(),
        }
    }
}
