use thiserror::Error;

/// Errors raised by the melody identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed Standard MIDI File input.
    #[error("MIDI parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A caller supplied an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite values in parameters, gradients or losses.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),

    /// Malformed checkpoint container.
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
