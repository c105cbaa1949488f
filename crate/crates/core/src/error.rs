//! Crate-wide error type.

/// Errors produced anywhere in the pipeline.
///
/// The variants map onto process exit codes at the CLI boundary:
/// `Config` is a usage/configuration problem, `Data`/`Format` are input
/// problems, `Numeric` signals NaN or overflow detected during training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or trajectory dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid configuration or unusable combination of settings.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// A file exists but cannot be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// NaN or non-finite values where finite math was required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// API misuse, e.g. backward on a spent tape.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
