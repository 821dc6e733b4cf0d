//! Log and linear quantizers over real values.
//!
//! Rounding is decided on the exact binary mantissa of the input, so the
//! result is the exact `Round(log_B |x|)` with no floating-point `log2` in
//! the decision path.

use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};

use super::code::LogCode;
use super::config::{exp2i, QuantKind, QuantizerConfig, Rounding};

/// `ceil(2^(1/4) * 2^52)`: smallest 53-bit mantissa at or above `2^(1/4)`.
pub(crate) const MANT_QUARTER: u64 = 5_355_712_719_992_598;
/// `ceil(2^(1/2) * 2^52)`.
pub(crate) const MANT_HALF: u64 = 6_369_051_672_525_773;
/// `ceil(2^(3/4) * 2^52)`.
pub(crate) const MANT_THREE_QUARTER: u64 = 7_574_121_564_787_630;

/// Splits a finite positive `x` into `(n, m)` with `x = m * 2^(n - 52)` and
/// `m` in `[2^52, 2^53)`.
#[inline]
pub(crate) fn decompose(x: f64) -> (i32, u64) {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    if biased == 0 {
        let msb = 63 - frac.leading_zeros() as i32;
        (msb - 1074, frac << (52 - msb))
    } else {
        (biased - 1023, frac | (1u64 << 52))
    }
}

/// `Round(log_B |x|)` in exponent-grid units (`B = 2^(2^-base_frac_bits)`).
#[inline]
pub fn log_grid_units(x: f64, base_frac_bits: u8, rounding: Rounding) -> i64 {
    let (n, m) = decompose(x.abs());
    let n = n as i64;
    match (base_frac_bits, rounding) {
        (0, Rounding::FloorMsb) => n,
        (0, Rounding::Nearest) => n + (m >= MANT_HALF) as i64,
        (_, Rounding::FloorMsb) => 2 * n + (m >= MANT_HALF) as i64,
        (_, Rounding::Nearest) => {
            2 * n + (m >= MANT_QUARTER) as i64 + (m >= MANT_THREE_QUARTER) as i64
        }
    }
}

fn check_input(x: f64, cfg: &QuantizerConfig, kind: QuantKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::config(format!("expected a {kind} quantizer, got {cfg}")));
    }
    if !x.is_finite() {
        return Err(Error::Domain(format!("cannot quantize non-finite value {x}")));
    }
    if x < 0.0 && !cfg.signed {
        return Err(Error::NegativeUnsigned(x));
    }
    Ok(())
}

/// Log quantizer.
///
/// Zero maps to the zero code. Otherwise the rounded exponent is clipped to
/// `fsr - step` from above, and exponents at or below `fsr - 2^mag_bits * step`
/// flush to the zero code.
pub fn logquant(x: f64, cfg: &QuantizerConfig) -> Result<LogCode> {
    check_input(x, cfg, QuantKind::Log)?;
    if x == 0.0 {
        return Ok(LogCode::ZERO);
    }
    Ok(logquant_unchecked(x, cfg))
}

/// [`logquant`] without config or input validation; `x` must be finite.
#[inline]
pub(crate) fn logquant_unchecked(x: f64, cfg: &QuantizerConfig) -> LogCode {
    if x == 0.0 {
        return LogCode::ZERO;
    }
    let units = log_grid_units(x, cfg.base_frac_bits, cfg.rounding);
    let fsr = cfg.fsr_units();
    let span = 1i64 << cfg.mag_bits();
    if units <= fsr - span {
        return LogCode::ZERO;
    }
    let units = units.min(fsr - 1);
    LogCode::new(x < 0.0, (units - fsr + span) as u32)
}

/// Linear quantizer with step `2^(fsr - mag_bits)`, clipped to the largest
/// code that fits the magnitude field.
pub fn linquant(x: f64, cfg: &QuantizerConfig) -> Result<LogCode> {
    check_input(x, cfg, QuantKind::Linear)?;
    Ok(linquant_unchecked(x, cfg))
}

#[inline]
pub(crate) fn linquant_unchecked(x: f64, cfg: &QuantizerConfig) -> LogCode {
    let steps = x.abs() / cfg.linear_step();
    let steps = match cfg.rounding {
        Rounding::Nearest => steps.round(),
        Rounding::FloorMsb => steps.floor(),
    };
    let code = steps.min(cfg.max_code() as f64) as u32;
    LogCode::new(x < 0.0, code)
}

/// Quantizes with whichever kind `cfg` selects.
pub fn quantize(x: f64, cfg: &QuantizerConfig) -> Result<LogCode> {
    match cfg.kind {
        QuantKind::Log => logquant(x, cfg),
        QuantKind::Linear => linquant(x, cfg),
    }
}

#[inline]
pub(crate) fn quantize_unchecked(x: f64, cfg: &QuantizerConfig) -> LogCode {
    match cfg.kind {
        QuantKind::Log => logquant_unchecked(x, cfg),
        QuantKind::Linear => linquant_unchecked(x, cfg),
    }
}

/// Real value of a code. Integer exponents are exact; base-sqrt(2) odd
/// exponents use the correctly rounded `sqrt(2)`.
#[inline]
pub fn dequantize(code: LogCode, cfg: &QuantizerConfig) -> f64 {
    if code.is_zero() {
        return 0.0;
    }
    let magnitude = match cfg.kind {
        QuantKind::Log => {
            let units = code.exponent_units(cfg).expect("non-zero code");
            exp_units_to_f64(units, cfg.base_frac_bits)
        }
        QuantKind::Linear => code.code() as f64 * cfg.linear_step(),
    };
    if code.is_negative() {
        -magnitude
    } else {
        magnitude
    }
}

/// `B^units` evaluated in `f64`.
#[inline]
pub fn exp_units_to_f64(units: i64, base_frac_bits: u8) -> f64 {
    let clamp = |v: i64| v.clamp(-2000, 2000) as i32;
    if base_frac_bits == 0 {
        exp2i(clamp(units))
    } else {
        let whole = exp2i(clamp(units.div_euclid(2)));
        if units.rem_euclid(2) == 1 {
            whole * SQRT_2
        } else {
            whole
        }
    }
}

/// `dequantize(quantize(x))`.
pub fn quantize_value(x: f64, cfg: &QuantizerConfig) -> Result<f64> {
    Ok(dequantize(quantize(x, cfg)?, cfg))
}
