use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint parameter `{name}`: {reason}")]
    Checkpoint { name: String, reason: String },

    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("stage-1 parameters changed during stage 2: {0}")]
    FreezeViolation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("bad array file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
