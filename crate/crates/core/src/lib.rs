//! Map-conditioned traffic scenario generation with denoising diffusion.
//!
//! The crate has two generative stages. The first samples initial agent poses
//! on a vectorized map. The second samples 6 s trajectories as PCA latents,
//! conditioned on Frenet-frame motion-primitive candidates built from each
//! agent's initial pose. Around them sit the geometry, metrics, map
//! perturbation and pipeline modules.

pub mod codec;
pub mod diffusion;
pub mod error;
pub mod frenet;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod perturb;
pub mod pipeline;
pub mod scene;

pub use error::{Error, Result};
