use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters or architecture descriptors.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation's preconditions (shapes, counts, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// NaN or infinity showed up where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Input data could not be turned into a usable corpus.
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
