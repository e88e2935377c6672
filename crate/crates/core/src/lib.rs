//! One rectified-flow transformer that generates small images and segments
//! referred objects, with the synthetic data, latent codec and analysis
//! tooling around it.

pub mod ablation;
pub mod analysis;
pub mod codec;
pub mod data;
pub mod dit;
mod error;
pub mod eval;
pub mod flow;
mod nn;
pub mod reproduce;
pub mod samplers;
pub mod train;

pub use error::{Error, Result};
pub use maskflow_tensor as tensor;
