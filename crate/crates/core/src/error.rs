use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants are grouped by how a caller should react: configuration
/// problems are user errors, data problems point at a corpus or artifact
/// file, and numeric problems mean the computation itself degenerated.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or incompatible option combination.
    #[error("config error: {0}")]
    Config(String),

    /// Shape or dimension mismatch between tensors handed to an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Problem with an input corpus, dataset, or serialized artifact.
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Numerical degeneracy: zero-norm vectors, NaN/Inf losses, and similar.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint file is corrupt, truncated, or from an incompatible config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
