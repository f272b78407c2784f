use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// A linear solve or integrator failed.
    #[error("numerical error: {message}")]
    Numerical {
        message: String,
        condition: Option<f64>,
    },

    /// The model itself is inadequate for the requested parameters,
    /// e.g. the Fock truncation is too small.
    #[error("model error: {0}")]
    Model(String),

    /// A density matrix violating its invariants.
    #[error("state error: {0}")]
    State(String),

    /// Mismatched grids or dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Missing or unknown named parameters.
    #[error("schema error: {0}")]
    Schema(String),

    /// A value that fails a type invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed file contents.
    #[error("{}:{line}: {message}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            condition: None,
        }
    }

    /// True when a computation failed on otherwise valid input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Model(_))
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Numerical { .. } | Error::Model(_) | Error::Io { .. }
        )
    }
}
