use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid model or operator configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a documented precondition.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A reduction was asked to average over zero elements.
    #[error("empty reduction: {0}")]
    EmptyReduction(String),

    /// Zero eigenvalue passed to the ZOH discretization.
    #[error("singular discretization: eigenvalue is zero")]
    Singularity,

    /// Misuse of the gradient tape.
    #[error("tape error: {0}")]
    Tape(String),

    /// A metric is not defined for the given samples.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A timing measurement could not be taken reliably.
    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
