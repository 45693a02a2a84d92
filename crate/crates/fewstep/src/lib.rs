//! Embedding-space diffusion for sequence-to-sequence text generation,
//! built for desk-scale experiments on few-step sampling.
//!
//! The crate provides the full pipeline: time-indexed noise schedules, a
//! trainable embedding codebook with nearest-neighbour rounding, Gaussian
//! forward/reverse diffusion kernels with per-token timesteps, a tiny
//! encoder-decoder denoiser with exact gradients, confidence-driven
//! timestep rescaling, a training loop with perturbed self-conditioning,
//! a sampler with three self-conditioning modes plus MBR decoding over
//! length and noise beams, and the statistical analyses (estimation gap,
//! residual regression, Shapiro-Wilk) used to study self-conditioning
//! error.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod model;
pub mod noise_scaling;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
