use thiserror::Error;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error(transparent)]
    Core(#[from] polynext_core::Error),
    #[error("model is not polynomial-foldable; offending layers: {}", .0.join(", "))]
    NotFoldable(Vec<String>),
    #[error("no add/multiply lowering for {0}")]
    Unsupported(String),
    #[error("circuit would have about {estimate} nodes, above the limit of {limit}")]
    TooLarge { estimate: u64, limit: u64 },
    #[error("node {node}: {msg}")]
    Malformed { node: usize, msg: String },
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CircuitError> = std::result::Result<T, E>;
