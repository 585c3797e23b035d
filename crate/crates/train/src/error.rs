use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] polynext_core::Error),
    #[error(transparent)]
    Circuit(#[from] polynext_circuit::CircuitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub(crate) fn format_err(msg: impl Into<String>) -> TrainError {
    TrainError::Format(msg.into())
}
