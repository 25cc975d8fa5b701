use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation was applied to a sequence or trajectory in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// Exhaustive enumeration would exceed the configured budget.
    #[error("enumeration needs {required} terminals but the budget is {budget}")]
    Budget { required: u128, budget: u128 },

    /// Malformed corpus text.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// Invalid or unreadable run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Checkpoint(#[from] crate::io::checkpoint::CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
