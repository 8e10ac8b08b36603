//! Federated Granger causality training simulator with closed-form
//! uncertainty propagation.
//!
//! The crate simulates the client/server protocol that learns cross-client
//! coupling blocks of a block-structured linear dynamical system, propagates
//! every parameter and state covariance in closed form alongside training,
//! solves the steady-state fixed points, and validates the closed forms
//! against a Monte-Carlo ensemble.

pub mod client;
pub mod ekf;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod protocol;
pub mod steady;
pub mod uncertainty;
pub mod world;

pub use error::{FedgcError, Result};
