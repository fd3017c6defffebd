//! Gaussian-process kriging on a cluster: likelihood, fitting, prediction
//! and simulation. All order-n² objects stay distributed; the master only
//! sees scalars and vectors of length n or m.

pub mod covariance;
pub mod optimize;
mod problem;

use thiserror::Error;

pub use covariance::{matern_correlation, CovarianceSpec, Smoothness, BUILTIN_KERNELS};
pub use optimize::{NelderMeadConfig, Termination};
pub use problem::{FitResult, KrigeProblem, Prediction, ProblemConfig, TraceEntry};

#[derive(Debug, Error)]
pub enum GpError {
    #[error(transparent)]
    Cluster(#[from] crate::Error),
    #[error("unsupported Matérn smoothness {0} (supported: 0.5, 1.5, 2.5)")]
    UnsupportedSmoothness(f64),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("covariance is not positive definite at theta = {theta:?} (diagonal block {block}, row {row})")]
    NotPositiveDefinite { theta: Vec<f64>, block: usize, row: usize },
    #[error("log-likelihood is not finite at theta = {theta:?}")]
    NonFiniteObjective { theta: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl GpError {
    /// Wraps a cluster error, recognising a failed factorization.
    pub(crate) fn at(theta: &[f64], e: crate::Error) -> Self {
        match e.fault() {
            Some(crate::Fault::NotPositiveDefinite { block, row }) => {
                GpError::NotPositiveDefinite { theta: theta.to_vec(), block: *block, row: *row }
            }
            _ => GpError::Cluster(e),
        }
    }
}
