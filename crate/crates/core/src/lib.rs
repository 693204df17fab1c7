//! Mixed-precision quantization-aware training.
//!
//! Small tensor/autodiff engine, uniform symmetric quantizers with
//! power-of-two thresholds, a Gumbel-Softmax search over (threshold,
//! bit-width) schemes, compression objectives, and the two-phase
//! fine-tuning procedure, sized for small image-classification models
//! on a CPU.

pub mod checkpoint;
pub mod compression;
pub mod data;
pub mod error;
pub mod graph;
pub mod hmq;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
