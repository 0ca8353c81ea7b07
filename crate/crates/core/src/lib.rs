//! Exponential-family latent auto-encoders, the auto-classifier-encoder, and
//! the analytics around them.

pub mod autodiff;
pub mod data;
pub mod entropy;
pub mod error;
pub mod expfamily;
pub mod nets;
pub mod rng;
pub mod symmetry;
pub mod tensor;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
pub use tensor::Tensor;
