use thiserror::Error;

#[derive(Debug, Error)]
pub enum DitError {
    #[error(transparent)]
    Core(#[from] layered_core::Error),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DitError> = std::result::Result<T, E>;
