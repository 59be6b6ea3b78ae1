//! Mean-field linear-quadratic optimal control with Markov regime switching.
//!
//! The crate solves the closed-loop problem through the orthogonal
//! decomposition `X = X₁ + X₂`, where `X₂ = E[X | regime history]` is the
//! mean channel and `X₁` the deviation channel, and then measures how fast
//! finite-horizon optimal pairs approach the infinite-horizon pair.
//!
//! Module map:
//!
//! - [`markov`]: generator validation, the coupling operator `Λ`, exact regime paths.
//! - [`model`]: raw coefficients, the `Γ₁ = Γ`, `Γ₂ = Γ + Γ̄` decomposition, forcing signals.
//! - [`stability`]: coupled Lyapunov certificates and the decay rate `δ*`.
//! - [`riccati`]: backward RK4 for the coupled Riccati system, the stationary limit.
//! - [`feedforward`]: the offset ODE `η₂` and feedforward controls `v₁`, `v₂`.
//! - [`simulate`]: Monte Carlo of the closed loop and cost estimators.
//! - [`turnpike`]: coupled finite/infinite-horizon experiments and exponential fits.
//! - [`scenario`]: the JSON scenario format shared with the `mflq` command-line tool.
//!
//! Regime indices are zero-based throughout the API and in every file format.

pub mod feedforward;
pub mod linalg;
pub mod markov;
pub mod model;
pub mod riccati;
pub mod scenario;
pub mod simulate;
pub mod stability;
pub mod stats;
pub mod turnpike;

mod error;

pub use error::Error;

/// Matrix type used across the crate.
pub type Mat = nalgebra::DMatrix<f64>;
/// Vector type used across the crate.
pub type Vector = nalgebra::DVector<f64>;

/// Index of the deviation subsystem (`k = 1`).
pub const DEVIATION: usize = 0;
/// Index of the mean subsystem (`k = 2`).
pub const MEAN: usize = 1;
