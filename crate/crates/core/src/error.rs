use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vertex count {0}")]
    InvalidVertexCount(usize),
    #[error("edge ({i}, {j}) out of range for {n} vertices")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("strict graph violation: {0}")]
    StrictViolation(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("weight matrix at grid point {index} has nonzero entry ({i}, {j}) outside the sparsity pattern")]
    NonConforming { index: usize, i: usize, j: usize },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("determinant of the transition matrix became non-positive at t = {0}")]
    DeterminantSign(f64),
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("infeasible transformation: {0}")]
    Infeasible(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::DimensionMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
