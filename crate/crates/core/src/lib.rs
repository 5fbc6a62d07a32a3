//! Variable-rate hierarchical VAE image codec with bound-guided training.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod entropy;
pub mod eval;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod testing;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use model::{ArchConfig, Codec, CodecOutput};
