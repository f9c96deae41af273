//! Linear Gaussian one-factor state space: Kalman filter, exact likelihood and
//! maximum-likelihood estimation.

mod filter;
mod mle;
mod params;

pub use filter::{kalman_filter, loglik, FilterOutput};
pub use mle::{estimate_mle, initial_guess, CovStructure, MleOptions, MleResult};
pub use params::{kalman_max, LinearSsmParams};

/// Prior state variance used when the state is a random walk.
pub const DIFFUSE_VARIANCE: f64 = 1e7;
