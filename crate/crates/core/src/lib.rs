//! HRTF individualization from anthropometric parameters through a
//! source-position-independent latent space.
//!
//! A hypernetwork autoencoder, conditioned on source position and frequency,
//! compresses each subject's log-magnitude HRTF into per-frequency
//! "prototypes" by averaging latents over source positions. Estimators map
//! anthropometry to prototypes, and the frozen decoder renders them on any
//! source grid.

pub mod autoencoder;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod estimators;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
