//! Variational inference for two-level hierarchical models with a global
//! latent `θ` and per-branch locals `z_i`.
//!
//! The crate provides joint, branch and amortized Gaussian families, their
//! reparameterized ELBO estimators (including minibatch subsampling), an Adam
//! training loop, evaluation metrics and data preparation utilities.

pub mod amortize;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod estimators;
pub mod families;
pub mod math;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod posterior;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
