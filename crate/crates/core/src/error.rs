use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate embedding: pre-normalization norm {norm:e} is below threshold")]
    DegenerateEmbedding { norm: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("batch contains neither positive nor negative pairs")]
    EmptyBatch,

    #[error("mining failed: {0}")]
    Mining(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Divergence { step: usize, what: &'static str },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation failures map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Argument(_)
                | Error::InvalidDataset(_)
                | Error::Parse { .. }
                | Error::Checkpoint(_)
        )
    }
}
