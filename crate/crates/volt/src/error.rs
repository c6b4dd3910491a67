//! Error type shared across the crate, with process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoltError {
    /// Tensor or parameter dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset, manifest, or checkpoint content problems.
    #[error("data error: {0}")]
    Data(String),
    /// NaN/Inf or other numeric failure.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VoltError>;

impl VoltError {
    pub fn shape(msg: impl Into<String>) -> Self {
        VoltError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        VoltError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        VoltError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        VoltError::Numeric(msg.into())
    }

    /// Exit codes: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            VoltError::Shape(_) | VoltError::Config(_) => 2,
            VoltError::Data(_) | VoltError::Io(_) => 3,
            VoltError::Numeric(_) => 4,
        }
    }
}
