use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how a caller should react: `Config`/`Parse`/
/// `Shape`/`State` indicate misuse of the API or a bad configuration,
/// `Data`/`Io`/`Format` indicate unreadable or malformed inputs, and
/// `Numeric` indicates a runtime numerical failure (NaN/Inf in training).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Parse error in a configuration artifact (arch string, config file).
    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    /// Malformed or inconsistent input data (CSV, IDX, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Unrecognized or corrupted file format.
    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Operation invoked in the wrong order (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn parse(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse { location: location.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
