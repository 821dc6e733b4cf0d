//! Logarithmic number representation for neural networks.
//!
//! Log and linear quantizers, shift-only dot products with linear or
//! log-domain accumulation, a small CNN stack running in float or
//! multiplier-free arithmetic, quantized training, FSR calibration and the
//! binary model/dataset formats.

pub mod calib;
pub mod data;
pub mod error;
pub mod format;
pub mod lognum;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
