use thiserror::Error;

use crate::linalg::LinalgError;
use crate::model::Termination;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("design matrix is numerically singular (reciprocal condition {rcond:e})")]
    SingularDesign { rcond: f64 },
    #[error("invalid correlation factor: {0}")]
    InvalidCorrelation(String),
    #[error("invalid standard deviations: {0}")]
    InvalidStdDev(String),
    #[error("degenerate scatter: S[{index},{index}] = {value:e}")]
    DegenerateScatter { index: usize, value: f64 },
    #[error("not estimable: {0}")]
    NotEstimable(String),
    #[error("rho = {rho} does not give a positive definite {dim}x{dim} correlation matrix")]
    InvalidRho { dim: usize, rho: f64 },
    #[error("{failed} of {total} bootstrap refits failed (more than 10%)")]
    InsufficientReplicates { failed: usize, total: usize },
    #[error("fit on the observed data terminated with {0}")]
    FitFailed(Termination),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid scenario field `{field}`: {message}")]
    InvalidScenario { field: &'static str, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
