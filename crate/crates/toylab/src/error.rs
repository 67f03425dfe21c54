use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] omniweights_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

impl LabError {
    pub fn is_io(&self) -> bool {
        matches!(self, LabError::Core(e) if e.is_io())
    }
}
