//! Learned CSI feedback compression: a dense autoencoder whose latent
//! outputs are quantized with per-output scalar codebooks under an unequal
//! bit allocation, trained end to end with a straight-through estimator.

pub mod alloc;
pub mod channel;
mod codec;
pub mod error;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod quantizer;
pub mod train;

pub use error::{Error, Result};
