use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("filter size must be a positive odd integer, got {0}")]
    EvenFilter(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("covariance is not positive semi-definite: a={a}, d={d}, b={b}")]
    InvalidCovariance { a: f64, d: f64, b: f64 },

    #[error("group must contain at least one element")]
    EmptyGroup,

    #[error("zero-padded translations do not form a group")]
    ZeroPaddedTranslations,

    #[error("kernel is not equivariant under the group: max violation {violation:e} > {tol:e}")]
    NotEquivariant { violation: f64, tol: f64 },

    #[error("kernel matrix is singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("pair ({row}, {col}) failed: {source}")]
    Pair {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("work directory {0} belongs to a different run configuration")]
    JournalMismatch(PathBuf),

    #[error("run interrupted after {completed} tiles")]
    Interrupted { completed: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
