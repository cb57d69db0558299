use thiserror::Error;

#[derive(Debug, Error)]
pub enum CghError {
    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("{field} {constraint}")]
    Invalid { field: String, constraint: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("temperature must be > 0, got {0}")]
    Temperature(f64),

    #[error("batch of {batch} entries does not fit in a bank of size {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },

    #[error("image {width}x{height} is smaller than the minimum decodable size {min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CghError {
    pub fn invalid(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        CghError::Invalid {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CghError>;
