//! Continual learning on digit-image task streams with per-neuron learning
//! rates, plus the regularization baselines it is compared against.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod importance;
pub mod latent;
pub mod methods;
pub mod nn;
pub mod report;
pub mod stats;

pub use error::{Error, Result};
