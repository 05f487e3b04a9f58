use gnndt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("scenario generation failed: {0}")]
    Scenario(String),
    #[error("action has {got} entries, expected {expected}")]
    ActionLength { expected: usize, got: usize },
    #[error("step {t} is at or beyond the horizon {horizon}")]
    Horizon { t: usize, horizon: usize },
    #[error("invalid permutation: {0}")]
    Permutation(String),
    #[error("search size {size:.3e} exceeds the cap {cap:.3e}")]
    SearchCap { size: f64, cap: f64 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model: {0}")]
    Model(String),
    #[error("non-finite loss at step {step} (batch digest {digest:016x})")]
    NonFiniteLoss { step: u64, digest: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}
