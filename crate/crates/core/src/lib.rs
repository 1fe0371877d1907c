//! Variational autoencoders for implicit-feedback collaborative filtering
//! with standard or VampPrior priors, flat or two-level latents, optional
//! gated linear units and multinomial or Bernoulli likelihoods.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::Matrix;
