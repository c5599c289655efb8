use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds context window of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("candidate {index} does not fit the context window: {len} > {max} tokens")]
    CandidateOverflow { index: usize, len: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("ordering strategy not applicable: {0}")]
    StrategyInapplicable(String),

    #[error("transport error (retryable): {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Transport failures may succeed when the call is retried.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
