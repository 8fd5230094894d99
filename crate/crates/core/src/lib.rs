//! Limited-angle CT reconstruction with residual null-space mean-reverting
//! diffusion.
//!
//! The crate is organised bottom-up: [`numerics`] (tensors, FFT, conv,
//! gradients, AdamW), [`tomography`] (parallel-beam Radon transform and
//! FBP), [`mrsde`] (mean-reverting SDE schedules and kernels), [`score`]
//! (score functions and the time-conditioned denoiser), [`pinv`] (learned
//! Radon pseudo-inverse and range/null projectors), [`sampler`] (the
//! rectified reverse sampler), [`restorer`], [`phantoms`] and [`eval`].

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod export;
pub mod mrsde;
mod nets;
pub mod numerics;
pub mod phantoms;
pub mod pipeline;
pub mod pinv;
pub mod restorer;
pub mod sampler;
pub mod score;
pub mod tomography;

pub use error::{Error, Result};
