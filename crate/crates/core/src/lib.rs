//! Gaussian process regression with a Student-t observation model.
//!
//! The crate provides
//!
//! * squared-exponential covariance functions with log-space gradients ([`kernels`]),
//! * the Student-t likelihood and adaptive Gauss–Kronrod tilted-moment integration
//!   ([`likelihood`], [`quadrature`]),
//! * an expectation-propagation engine that tolerates negative site precisions:
//!   damped parallel and sequential sweeps, fractional (power) updates and a
//!   double-loop fallback with objective-verified step sizes ([`ep`]),
//! * a Laplace-approximation baseline ([`laplace`]) and an exact Gaussian-noise
//!   baseline ([`gaussian`]),
//! * MAP hyperparameter estimation, a degrees-of-freedom grid mixture and
//!   prediction ([`model`]),
//! * CSV ingestion, the Friedman generator and the one-dimensional convergence
//!   fixtures ([`data`]).
//!
//! All hyperparameters live in log space: `log σ_se²`, `log l_k²`, `log σ²` and
//! `log log ν`.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod ep;
pub mod gaussian;
pub mod kernels;
pub mod laplace;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod quadrature;

pub use data::{Dataset, FixtureSpec};
pub use ep::{EpConfig, EpRun, EpTrace, SiteSet};
pub use kernels::KernelParams;
pub use likelihood::{StudentTParams, TiltedMoments};
pub use linalg::{PosteriorApprox, SymMatrix};
pub use model::{FitConfig, FittedModel, Hyperparameters};
