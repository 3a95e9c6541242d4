//! Hadamard-quantized diffusion toolkit.
//!
//! Building blocks for low-bit quantization of small diffusion models:
//! block-diagonal Walsh-Hadamard transforms that spread activation outliers,
//! symmetric fake/real quantization with straight-through gradients and
//! timestep-indexed learnable scales, integer-only linear and convolution
//! kernels, LoRA adapters, and a desk-scale teacher/student distillation
//! harness with outlier analysis tooling.

pub mod analysis;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod hadamard;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod qkernels;
pub mod quant;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod threads;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Tensor};
