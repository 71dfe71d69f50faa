use thiserror::Error;

/// Errors raised by the solver, the flow generators and the I/O helpers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {asym:e})")]
    NotSymmetric { asym: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid support: {0}")]
    InvalidSupport(String),

    #[error("support submatrix of size {size} is singular or too ill-conditioned (cond ~ {cond:e})")]
    SingularSubmatrix { size: usize, cond: f64 },

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("degenerate denominator D - alpha*D_g^2 = {value:e}")]
    DegenerateDenominator { value: f64 },

    #[error("degenerate pivot {value:e} at index {index}")]
    DegeneratePivot { index: usize, value: f64 },

    #[error("cannot shrink a support of size one")]
    EmptySupport,

    #[error("turning-point cap of {cap} reached")]
    CycleLimit { cap: usize },

    #[error("non-positive price {value} at row {row}, column {col}")]
    NonPositivePrice { row: usize, col: usize, value: f64 },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("price series is empty")]
    EmptySeries,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Numerical breakdowns that a fresh factorization of the state can cure.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::DegenerateDenominator { .. } | Error::DegeneratePivot { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
