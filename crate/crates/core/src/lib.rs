//! Maximum likelihood estimation of multivariate normal covariance matrices
//! whose correlation matrix is a Kronecker product U ⊗ V of two smaller
//! correlation matrices.
//!
//! The separable covariance and unrestricted estimators are included for
//! comparison. On top of the fits sit parametric bootstrap separability tests
//! and a Monte-Carlo harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod simulation;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::{Matrix, SpdMatrix};
pub use model::{CorrelationFactor, Dataset, FitReport, RelaxedParams, SepCorParams, StdDevVector, Termination};
pub use solver::{SepCovParams, SolverConfig};
