//! Recursive identification of FIR models with kernel-based regularization
//! and simultaneous online estimation of the kernel hyperparameters.
//!
//! The library provides:
//!
//! - [`lti`]: discrete-time transfer-function simulation used to generate
//!   identification datasets,
//! - [`prior`]: the structured regularization matrix `Π(η) = U·W(η)·Uᵀ`
//!   with its hyperparameter constraints,
//! - [`rls`]: classical recursive least squares (the comparison baseline),
//! - [`regularized`]: the regularized recursive estimator with per-sample
//!   hyperparameter re-linearization,
//! - [`hyper`]: the marginal-likelihood gradient surrogate and its
//!   constraint-subspace projection,
//! - [`batch`]: batch-mode reference solutions (regularized least squares,
//!   marginal likelihood, exact gradient) used as test oracles,
//! - [`metrics`]: impulse-response MSE, model fit and SNR scoring,
//! - [`experiment`]: the end-to-end benchmark harness and CSV output.

pub mod batch;
pub mod error;
pub mod experiment;
pub mod hyper;
pub mod lti;
pub mod metrics;
pub mod prior;
pub mod regularized;
pub mod rls;

pub use error::{Error, Result};
