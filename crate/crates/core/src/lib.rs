//! Simulation engine for INT8 quantized CNN training with per-channel
//! gradient scales, magnitude-aware clipping and a per-channel distribution
//! discriminator.

pub mod backward;
pub mod clip;
pub mod conv;
pub mod error;
pub mod harness;
pub mod quant;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{I32Tensor, I8Tensor, Shape, Tensor, Tensor4};
