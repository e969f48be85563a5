use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    #[error("covariance shooting did not converge after {iterations} iterations (residual {residual:e})")]
    ShootingFailed { iterations: usize, residual: f64 },
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable process exit code for this error class.
    ///
    /// 1 usage/parse, 2 infeasible problem, 4 numerical failure. Exit code 3
    /// (no path) is not an error and is produced by the planner directly.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) | Error::ShootingFailed { .. } | Error::Sampling(_) => 2,
            Error::NonFinite(_) | Error::NumericalInstability(_) => 4,
            Error::DimensionMismatch { .. }
            | Error::InvalidParameter(_)
            | Error::Io(_)
            | Error::Parse(_) => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
