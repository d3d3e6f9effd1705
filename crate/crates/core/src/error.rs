//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` covers invalid parameters detected up front, `Capacity` covers
/// requests that exceed configured resource limits (dimension caps, operator
/// range caps, cluster enumeration caps) and `Numerical` covers failures of
/// the numerical machinery itself (lost convergence, non-Hermitian input to
/// a symmetric solver, ...).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters.
    #[error("config error: {0}")]
    Config(String),

    /// A resource limit would be exceeded; carries what and by how much.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Numerical failure (convergence loss, consistency check failure, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// I/O failure while reading configs or writing results.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON in a config or report file.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a config error.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for a capacity error.
    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }

    /// Shorthand for a numerical error.
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
