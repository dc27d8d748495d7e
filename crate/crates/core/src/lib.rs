//! Simulation and spectral inference for exchangeable interacting particle
//! systems with a mean-field limit.
//!
//! The crate covers the full workflow: Euler-Maruyama generation of synthetic
//! ensembles, the stationary density of the linearized mean-field dynamics,
//! the weighted Sturm-Liouville eigenproblem of its generator, martingale
//! estimating functions built from the eigenpairs, a discretized
//! maximum-likelihood baseline, and a configuration-driven experiment harness.

pub mod baselines;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod invariant;
pub mod potentials;
pub mod simulator;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
