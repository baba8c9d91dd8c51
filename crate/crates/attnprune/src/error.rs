use thiserror::Error;

/// Errors surfaced by the pruning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer dimension did not match what the operation required.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("unknown architecture '{0}'")]
    UnknownArchitecture(String),

    #[error("unknown gate strategy '{0}'")]
    UnknownGate(String),

    #[error("model file error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
