use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Computation,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: column `{column}`: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        column: String,
        message: String,
    },

    #[error("purchases reference unknown patient ids: {}", .0.join(", "))]
    OrphanPurchases(Vec<String>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("observed data of subject `{subject}` has zero probability under the current parameters")]
    ZeroLikelihood { subject: String },

    #[error("no data to fit")]
    EmptyData,

    #[error("design matrix is rank deficient: column `{column}` is constant or collinear with earlier columns")]
    RankDeficient { column: String },

    #[error("Newton-Raphson did not converge after {iterations} iterations (log-likelihood trace: {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("{0}")]
    Computation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::OrphanPurchases(_)
            | Error::Contract(_)
            | Error::Validation(_)
            | Error::EmptyData => ErrorKind::Validation,
            Error::ZeroLikelihood { .. }
            | Error::RankDeficient { .. }
            | Error::NonConvergence { .. }
            | Error::Computation(_) => ErrorKind::Computation,
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
