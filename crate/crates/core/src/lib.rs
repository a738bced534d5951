//! Robust state estimation for linear time-varying plants whose output
//! packets may be dropped, together with the pseudo-covariance machinery
//! used to study its convergence.
//!
//! Module map:
//! - [`plant`]: plant description, sensitivity blocks, truth simulation
//! - [`channel`]: Bernoulli / Markov arrival processes and sequence probabilities
//! - [`estimator`]: the robust estimator step and Kalman baselines
//! - [`pcm`]: tilde-matrix recursion, homographic transforms, Φ products
//! - [`analysis`]: Riemannian metric, Hamiltonian classes, rank tests, contraction estimates
//! - [`sim`]: Monte Carlo experiments, empirical MSE, density estimates
//! - [`config`]: JSON configuration and presets

pub mod analysis;
pub mod channel;
pub mod config;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod pcm;
pub mod plant;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
