use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("masks overlap in {0} cells")]
    Overlap(usize),
    #[error("integral diverges: {0}")]
    Divergent(String),
    #[error("stencil of {needed} entries exceeds budget of {budget}")]
    MemoryBudget { needed: usize, budget: usize },
    #[error("negative interaction weight {0}")]
    NegativeWeight(f64),
    #[error("capacity overflow: {0}")]
    CapacityOverflow(String),
    #[error("explicit step unstable: delta * rate = {0} > 1")]
    StabilityViolation(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParam(msg.into()))
}
