//! Style-conditioned diffusion at desk scale.
//!
//! A v-prediction diffusion model whose denoiser attends to a fixed-format
//! prompt sequence and a KL-regularized style latent learned from images,
//! plus the surrounding machinery: aperture-isolating preprocessing, a
//! deterministic toy dataset, DDIM sampling with prior-sampled styles,
//! distribution metrics (FID, k-NN recall, PCA), and the downstream
//! classifier experiments used to judge synthetic data.

pub mod checkpoint;
pub mod config;
pub mod dataprep;
pub mod denoiser;
pub mod error;
pub mod evalsuite;
pub mod harness;
pub mod model;
pub mod nn;
pub mod report;
pub mod sampler;
pub mod schedule;
pub mod stylecodec;
pub mod styleenc;
pub mod trainer;

pub use error::{Error, Result};
