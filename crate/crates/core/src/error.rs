use thiserror::Error;

/// Error kinds shared by every module of the crate.
#[derive(Debug, Error)]
pub enum TtaError {
    /// Shapes, hyperparameters or layer wiring are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Caller supplied an invalid argument (label out of range, non-simplex row, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Operation is not valid in the current state (empty memory, backward without forward, ...).
    #[error("state error: {0}")]
    State(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed file contents (checkpoint, config, index file).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TtaError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TtaError::Config(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TtaError::Input(msg.into()))
}

pub(crate) fn state_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TtaError::State(msg.into()))
}
