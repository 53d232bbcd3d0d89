use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A solver or sampler state went non-finite.
    #[error("{what}: non-finite state at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] dsk_tensor::TensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::NonFinite { .. } | CoreError::Tensor(dsk_tensor::TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Invalid(msg.into())
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(CoreError::Dimension { what, expected, got })
    }
}
