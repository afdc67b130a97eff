use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("probability {0} is outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("group layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("case {station}/{date} has {missing} missing ensemble member(s)")]
    MissingMembers {
        station: String,
        date: String,
        missing: usize,
    },

    #[error("case {station}/{date} has no observation")]
    MissingObservation { station: String, date: String },

    #[error("training set too small: {got} complete cases, need at least {need}")]
    InsufficientTraining { got: usize, need: usize },

    #[error("non-finite log-likelihood at case {case_index}")]
    NonFiniteLikelihood { case_index: usize },

    #[error("quadrature did not converge on [{lower}, {upper}] (estimated error {error:e}): {context}")]
    QuadratureFailure {
        lower: f64,
        upper: f64,
        error: f64,
        context: String,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate case key {station}/{date}")]
    DuplicateKey { station: String, date: String },

    #[error("unknown group label `{0}`")]
    UnknownGroup(String),

    #[error("unknown date {0}")]
    UnknownDate(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures (as opposed to bad input) map to a distinct exit code in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLikelihood { .. } | Error::QuadratureFailure { .. }
        )
    }
}
