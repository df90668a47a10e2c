use thiserror::Error;

/// Errors raised by the linear-system layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinsolveError {
    #[error("Patankar weight denominator sigma[{index}] = {value} is not positive")]
    PwdViolation { index: usize, value: f64 },

    #[error("non-finite value {value} at ({row}, {col}) while assembling the system matrix")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is singular to working precision (pivot {pivot} at row {row})")]
    Singular { row: usize, pivot: f64 },

    #[error("solution component x[{index}] = {value:e} is negative beyond round-off ({threshold:e})")]
    NegativeSolution {
        index: usize,
        value: f64,
        threshold: f64,
    },
}

/// Crate-level error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linsolve(#[from] LinsolveError),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("structural violation in {matrix}[{row}][{col}] = {value:e}")]
    StructuralViolation {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("invalid initial state: {0}")]
    InvalidInitialState(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid coefficients for {method}: {reason}")]
    InvalidCoefficients { method: String, reason: String },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("step {step}: non-positive sigma at level {level}, component {index} ({value:e})")]
    PwdInvariant {
        step: usize,
        level: usize,
        index: usize,
        value: f64,
    },

    #[error("step {step}: non-finite value in component {index}")]
    NonFinite { step: usize, index: usize },

    #[error("step {step}: system matrix is not an M-matrix: {detail}")]
    NotMMatrix { step: usize, detail: String },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: LinsolveError,
    },

    #[error("startup failed at interval {interval}: {reason}")]
    Startup { interval: usize, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("reference solution error: {0}")]
    Reference(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
