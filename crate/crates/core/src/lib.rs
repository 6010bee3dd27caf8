//! Conditional diffusion vocoder toolkit.
//!
//! A self-contained pipeline for mel-conditioned waveform synthesis with a
//! diffusion refinement network: audio/mel feature extraction, a minimal
//! differentiable numerical core, schedule mathematics including the
//! bilateral noise-schedule search and alignment, the time-aware
//! location-variable-convolution refiner, a lightweight noise-ratio
//! predictor, and training/sampling/evaluation plumbing behind a CLI.

pub mod audio;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phi;
pub mod refiner;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
