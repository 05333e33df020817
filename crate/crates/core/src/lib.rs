//! Quantization-aware training lab: simulated quantization with straight-through
//! gradients, oscillation instrumentation, EMA shadow parameters and post-hoc
//! quantization correction (QC) with batch-norm absorption and folding.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! anything touching the filesystem live in the `qatlab` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod ema;
mod error;
pub mod gradcheck;
pub mod nn;
pub mod oscillation;
pub mod qc;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

/// Lower bound applied to every scale factor after an update.
pub const MIN_SCALE: f64 = 1e-8;
