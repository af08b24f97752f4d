use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/sequence geometry does not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration violates one of its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (manifests, images, metadata).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values, diverging losses, or failed numeric checks.
    #[error("numeric fault: {0}")]
    Numeric(String),

    /// Checkpoint file is corrupt, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for bad data/config, 3 for numeric faults.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
