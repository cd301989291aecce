//! Federated variational inference for hierarchical probabilistic models
//! with global and silo-local latent variables.
//!
//! The library simulates a server and a set of data silos in one process.
//! Two training algorithms are provided:
//!
//! * [`federation::run_sfvi`] — per-round gradient exchange. Each round the
//!   server broadcasts the model parameters, the global variational
//!   parameters, and the shared global noise draw; each silo updates its own
//!   local variational parameters and returns an additive gradient
//!   contribution for the global quantities. The trajectory is invariant to
//!   how observations are partitioned across silos.
//! * [`averaging::run_sfvi_avg`] — communication-efficient variant. Silos
//!   train locally for `m` steps on a rescaled objective, then the server
//!   averages model parameters arithmetically and averages the global
//!   Gaussian approximations through their Wasserstein barycenter.
//!
//! Module map:
//!
//! * [`linalg`] — dense vectors/matrices, unit lower-triangular factors,
//!   symmetric eigendecomposition, PSD matrix square root, Cholesky.
//! * [`rng`] — counter-based splittable random streams keyed by derivation
//!   paths, so any partitioning of the data consumes identical noise.
//! * [`vfamily`] — the structured Gaussian variational family: sampling,
//!   log-densities, and analytic parameter/argument gradients.
//! * [`models`] — the model interface plus four concrete models and
//!   synthetic data generators.
//! * [`estimator`] — single-sample ELBO decomposition and the per-silo
//!   gradient pieces exchanged during training.
//! * [`optimizer`] — Adam with serializable state.
//! * [`federation`] — message types, server/silo round logic, orchestrator.
//! * [`averaging`] — Gaussian Wasserstein barycenters and the local-phase
//!   training loop.
//! * [`harness`] — experiment configs, CLI plumbing, finite-difference
//!   gradient oracle, metrics, posterior prediction.

// Reductions keep explicit index order on purpose: left-to-right summation
// is part of the reproducibility contract.
#![allow(clippy::needless_range_loop)]

pub mod averaging;
pub mod estimator;
pub mod federation;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod optimizer;
pub mod rng;
pub mod vfamily;

mod error;

pub use error::{Error, Result};
