//! Decomposed vector-quantized sequence autoencoders.

pub mod baselines;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod model;
pub mod ops;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Parameter, Real, Tensor};
