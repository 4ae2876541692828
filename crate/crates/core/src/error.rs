use thiserror::Error;

/// Errors raised by the diffusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid construction parameters (schedule endpoints, network dims, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A diffusion step index outside 1..=T.
    #[error("step index {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    /// A non-finite value showed up mid-computation; the run must abort.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed or mismatched checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset manifest or image file problems.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
