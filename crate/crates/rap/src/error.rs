use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum RapError {
    /// Malformed input file content.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Input data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller-supplied argument is out of range or inconsistent.
    #[error("argument error: {0}")]
    Argument(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// API misuse (e.g. stepping the optimizer before any backward pass).
    #[error("usage error: {0}")]
    Usage(String),

    /// A training loss became non-finite; carries a diagnostic dump.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RapError>;

impl RapError {
    pub fn argument(msg: impl Into<String>) -> Self {
        RapError::Argument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        RapError::Validation(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        RapError::Usage(msg.into())
    }

    /// Process exit code for the CLI: 2 for bad input, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RapError::Parse { .. }
            | RapError::Validation(_)
            | RapError::Argument(_)
            | RapError::Shape { .. } => 2,
            _ => 1,
        }
    }
}
