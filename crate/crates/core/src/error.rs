use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Variants are grouped by the kind of failure so callers (notably the CLI)
/// can map them onto distinct exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an API contract: shape mismatch, bad argument,
    /// inconsistent configuration, out-of-range index.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value or combination of values is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// A serialized artifact (corpus container, checkpoint, report) is
    /// malformed or does not match the declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Numeric failure that invalidates the run: NaN/Inf where finite values
    /// are required, divergent optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
