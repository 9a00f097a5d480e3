use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unit {unit}: occasions are not consecutive from 1 (found time {found}, expected {expected})")]
    NonMonotoneDropout {
        unit: String,
        expected: i64,
        found: i64,
    },
    #[error("unit {unit}: occasion {time} appears more than once")]
    DuplicateOccasion { unit: String, time: i64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("scale parameter must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("all observation weights are zero")]
    AllWeightsZero,
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("non-finite log-likelihood for unit {0}")]
    NonFiniteLikelihood(usize),
    #[error("all {0} starts failed")]
    AllStartsFailed(usize),
    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("label vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("invalid parameter set: {0}")]
    InvalidParams(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by malformed input rather than numerical trouble.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::NonMonotoneDropout { .. }
                | Error::DuplicateOccasion { .. }
                | Error::DimensionMismatch(_)
                | Error::NonFiniteValue(_)
                | Error::InvalidSpec(_)
                | Error::InvalidParams(_)
                | Error::Parse(_)
                | Error::MissingColumn(_)
                | Error::Io(_)
                | Error::LengthMismatch(..)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
