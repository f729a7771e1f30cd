//! Longitudinal deep-kernel Gaussian process regression.
//!
//! Observations are indexed by `(individual, time)`. The kernel adds a
//! time-varying term over encoded covariates to a time-invariant term over
//! learned per-individual embeddings, and inference runs in a sparse
//! variational scheme whose inducing points live in the latent space.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod experiment;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod numerics;
pub mod optimizer;
pub mod predictor;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
