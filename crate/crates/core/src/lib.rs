//! Mask-conditioned latent diffusion inpainting: noise schedule and samplers,
//! VAE, denoiser, conditioning and training, procedural corpora, generative
//! metrics and the segmentation benchmark.

pub mod blob;
pub mod error;
pub mod imageio;
pub mod inpaint;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod seed;
pub mod segbench;
pub mod synthdata;
pub mod train;
pub mod unet;
pub mod vae;

pub use error::{Error, Result};
