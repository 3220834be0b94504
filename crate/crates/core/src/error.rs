use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum MarfError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate normal: {0}")]
    DegenerateNormal(String),

    /// Raised by the reverse sweep when an adjoint reaches an operation
    /// that has no derivative rule.
    #[error("unsupported operation in reverse sweep: {0}")]
    UnsupportedOp(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MarfError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MarfError::InvalidInput(_) => 1,
            MarfError::Format(_) | MarfError::Io(_) | MarfError::Json(_) => 2,
            MarfError::DegenerateNormal(_)
            | MarfError::UnsupportedOp(_)
            | MarfError::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, MarfError>;
