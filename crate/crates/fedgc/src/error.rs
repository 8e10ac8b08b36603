//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedgcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive semidefinite in {context}: min eigenvalue {min_eig:.3e}")]
    NotPsd { context: String, min_eig: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error(
        "stability violated: {gain} has spectral radius {rho:.6} >= 1; \
         increase the ridge coefficient or reduce the learning rate"
    )]
    Stability { gain: String, rho: f64 },

    #[error("protocol error at round {round}: {message}")]
    Protocol { round: usize, message: String },

    #[error("rank-deficient regressor matrix: {message}")]
    RankDeficient { message: String },

    #[error("numerical failure in {context}: {message}")]
    Numerical { context: String, message: String },

    #[error("replica with seed {seed} diverged at round {round} (non-finite parameter)")]
    ReplicaDiverged { seed: u64, round: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FedgcError>;

impl FedgcError {
    pub fn dimension(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        FedgcError::Dimension {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
