use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Cholesky or eigensolver breakdown.
    #[error("decomposition failure: {0}")]
    Decomposition(String),

    /// Cholesky hit a non-positive pivot; the matrix is not positive definite.
    #[error("cholesky pivot {index} is non-positive ({value:e})")]
    NotPositiveDefinite { index: usize, value: f64 },

    /// Malformed binary input; `offset` is the byte position in the decoded stream.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The minimax objective became non-finite; training aborts rather than clipping.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        CoreError::Format {
            offset,
            message: msg.into(),
        }
    }
}
