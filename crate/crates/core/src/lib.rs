//! Blendshape-to-motor facial retargeting with a conditional sequence
//! diffusion model, a bootstrap training loop against a simulated robot face,
//! and a real-time streaming control service.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod face;
pub mod nn;
pub mod pipeline;
pub mod plant;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
