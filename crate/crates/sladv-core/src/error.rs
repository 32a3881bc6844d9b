use thiserror::Error;

/// Errors surfaced by the engine, protocol, and data layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem: shapes do not compose, a split plan does not
    /// match the network, a layer's parameters disagree with its
    /// hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad caller-supplied value (label out of range, empty dataset, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed file contents.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A numerically degenerate input (e.g. zero activation vector where a
    /// direction is required).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Invariant violation inside the library itself.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
