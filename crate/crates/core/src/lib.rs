//! Bayesian inference for vertically partitioned data.
//!
//! Clients each hold a block of covariates for the same observations. The
//! library provides auxiliary-variable and power-likelihood reformulations of
//! a model, federated variational inference over them (mean-field and
//! amortized families, STL gradients), a client/server protocol layer, and a
//! Langevin-based empirical Bayes alternative.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod soul;
pub mod math;
pub mod models;
pub mod neural;
pub mod variational;

pub use error::{Error, Result};
