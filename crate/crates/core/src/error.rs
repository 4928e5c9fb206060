use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed call (empty pools, zero step counts, ...).
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unsupported reward: {0}")]
    UnsupportedReward(String),
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(usize),
    /// Inconsistent sampler or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
