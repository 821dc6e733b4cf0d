//! Log-domain numerics.
//!
//! Codes and quantizers ([`logquant`], [`linquant`], [`dequantize`]),
//! fixed-point words with shift-only arithmetic, and the two dot-product
//! methods: linear weights against log activations ([`dot_method1`]) and
//! both operands in the log domain ([`dot_method2`]), with either linear or
//! log-domain accumulation.

mod code;
mod config;
mod dot;
mod fixed;
mod quant;

pub use code::LogCode;
pub use config::{
    QuantKind, QuantizerConfig, Rounding, MAX_ABS_FSR, MAX_LINEAR_BITWIDTH, MAX_LOG_BITWIDTH,
};
pub use dot::{
    dot_method1, dot_method1_words, dot_method2, log_accumulate, log_accumulate_step,
    log_accumulate_with, shift_by_grid_exponent, AccumMode, DistanceRule,
};
pub use fixed::{
    bitshift, log2_floor, log2_round, shift_mul_halfexp, sqrt2_threshold, AccumulatorWord,
    ArithFormat, ExponentWord,
};
pub use quant::{
    dequantize, exp_units_to_f64, linquant, log_grid_units, logquant, quantize, quantize_value,
};

pub(crate) use dot::log_sums_to_linear;
pub(crate) use fixed::shift_raw;
pub(crate) use quant::quantize_unchecked;
