//! Minimal tensor kernel: dense arrays, FFT filtering, convolution,
//! reverse-mode gradients over a fixed layer set, and AdamW.

pub mod autodiff;
pub mod container;
pub mod conv;
pub mod fft;
pub mod gradcheck;
pub mod filter;
pub mod optim;
pub mod params;
mod tensor;

pub use autodiff::{Graph, LinearMap, Var};
pub use conv::conv2d;
pub use fft::{fft_1d, ifft_1d};
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
pub use params::ParamStore;
pub use tensor::Tensor;
