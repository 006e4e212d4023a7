use thiserror::Error;

/// Crate-wide error type. The CLI maps these onto stable exit codes:
/// config/usage errors -> 1, data errors -> 2, numerical failures -> 3.
#[derive(Debug, Error)]
pub enum SigflowError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SigflowError {
    pub fn exit_code(&self) -> i32 {
        match self {
            SigflowError::Config(_) => 1,
            SigflowError::Data(_) | SigflowError::Checkpoint(_) | SigflowError::Io(_) => 2,
            SigflowError::Shape(_) | SigflowError::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, SigflowError>;
