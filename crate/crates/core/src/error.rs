use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("weight matrix is not symmetric positive definite")]
    WeightNotSpd,

    #[error("matrix is singular")]
    Singular,

    /// The q×q Gram matrix of a sketch lost rank; callers resample.
    #[error("sketched Gram matrix is rank deficient ({dropped} of {size} eigenvalues dropped)")]
    RankDeficient { dropped: usize, size: usize },

    #[error("sketch rejection limit of {limit} redraws exceeded for rule `{rule}`")]
    RejectionLimit { rule: String, limit: usize },

    #[error("sampling is not complete: stacked sketch has rank {rank} < {n}; E[Z] is positive definite if and only if the sampling is complete")]
    IncompleteSampling { rank: usize, n: usize },

    #[error("optimized probabilities require square complete sampling")]
    NotSquareSampling,

    #[error("degenerate pivot at index {0}")]
    DegeneratePivot(usize),

    #[error("eigenvalue {value:e} is negative beyond tolerance {tolerance:e}")]
    NegativeEigenvalue { value: f64, tolerance: f64 },

    #[error("non-finite entries in iterate")]
    NonFinite,

    #[error("expected positive entry, found {0}")]
    NonPositive(f64),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }
}
