//! Multiplier-free dot products and log-domain accumulation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::code::LogCode;
use super::config::{QuantKind, QuantizerConfig};
use super::fixed::{
    bitshift, pow2_neg_exponent_raw, shift_mul_halfexp, AccumulatorWord, ArithFormat, ExponentWord,
};

/// Where the dot-product terms are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AccumMode {
    /// Each term is converted to linear and summed in an accumulator word.
    #[default]
    Linear,
    /// Terms are summed in the log domain and converted once at the end.
    Log,
}

impl fmt::Display for AccumMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccumMode::Linear => "linear",
            AccumMode::Log => "log",
        })
    }
}

impl FromStr for AccumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(AccumMode::Linear),
            "log" => Ok(AccumMode::Log),
            other => Err(Error::config(format!(
                "unknown accumulation mode `{other}` (expected linear or log)"
            ))),
        }
    }
}

/// Distance used for the correction term of a log-domain accumulation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistanceRule {
    /// `|s - p|` with the full fractional part of the running sum.
    #[default]
    Fractional,
    /// `|floor(s) - p|`, dropping the running sum's fraction before the shift.
    FloorRunningSum,
}

fn check_log(cfg: &QuantizerConfig, what: &str) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != QuantKind::Log {
        return Err(Error::config(format!("{what} must be log-quantized, got {cfg}")));
    }
    Ok(())
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// `a * 2^e` for an exponent in grid units, as shift-adds.
///
/// Integer exponents are a single shift. Half-step exponents use
/// `2^floor(e) * (1 + 1/2)`, the same approximation as
/// [`shift_mul_halfexp`].
#[inline]
pub fn shift_by_grid_exponent(
    a: AccumulatorWord,
    units: i64,
    base_frac_bits: u8,
) -> Result<AccumulatorWord> {
    let clamp = |v: i64| v.clamp(-4096, 4096) as i32;
    if base_frac_bits == 0 {
        bitshift(a, clamp(units))
    } else {
        let whole = clamp(units.div_euclid(2));
        let main = bitshift(a, whole)?;
        if units.rem_euclid(2) == 1 {
            main.checked_add(&bitshift(a, whole - 1)?)
        } else {
            Ok(main)
        }
    }
}

/// Linear weights times log-coded activations: `sum_i Bitshift(w_i, x_i)`.
///
/// Weights are rounded onto the accumulator grid first; zero-coded
/// activations contribute nothing.
pub fn dot_method1(
    weights: &[f64],
    x_codes: &[LogCode],
    cfg_x: &QuantizerConfig,
    fmt: &ArithFormat,
) -> Result<AccumulatorWord> {
    check_len(weights.len(), x_codes.len())?;
    let words = weights
        .iter()
        .map(|&w| AccumulatorWord::from_f64(w, fmt))
        .collect::<Result<Vec<_>>>()?;
    dot_method1_words(&words, x_codes, cfg_x, fmt)
}

/// [`dot_method1`] over weights already held as accumulator words.
pub fn dot_method1_words(
    weights: &[AccumulatorWord],
    x_codes: &[LogCode],
    cfg_x: &QuantizerConfig,
    fmt: &ArithFormat,
) -> Result<AccumulatorWord> {
    check_len(weights.len(), x_codes.len())?;
    check_log(cfg_x, "activation")?;
    let mut acc = fmt.zero();
    for (w, x) in weights.iter().zip(x_codes) {
        let Some(units) = x.exponent_units(cfg_x) else {
            continue;
        };
        let term = shift_by_grid_exponent(*w, units, cfg_x.base_frac_bits)?;
        acc = if x.is_negative() {
            acc.checked_sub(&term)?
        } else {
            acc.checked_add(&term)?
        };
    }
    Ok(acc)
}

/// Both operands log-coded: per-term exponent `p_i = w_i + x_i` computed by
/// exponent-word addition.
///
/// In [`AccumMode::Linear`] each `sign_i * 2^p_i` (via [`shift_mul_halfexp`])
/// is summed in the accumulator. In [`AccumMode::Log`] positive and negative
/// terms go to two log-domain running sums that are converted to linear and
/// subtracted at the end.
pub fn dot_method2(
    w_codes: &[LogCode],
    x_codes: &[LogCode],
    cfg_w: &QuantizerConfig,
    cfg_x: &QuantizerConfig,
    accum: AccumMode,
    fmt: &ArithFormat,
) -> Result<AccumulatorWord> {
    check_len(w_codes.len(), x_codes.len())?;
    check_log(cfg_w, "weight")?;
    check_log(cfg_x, "activation")?;
    let f = fmt.exp_frac_bits;
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    let mut acc = fmt.zero();
    for (w, x) in w_codes.iter().zip(x_codes) {
        let (Some(wu), Some(xu)) = (w.exponent_units(cfg_w), x.exponent_units(cfg_x)) else {
            continue;
        };
        let p = ExponentWord::from_grid_units(wu, cfg_w.base_frac_bits, f)?
            .checked_add(&ExponentWord::from_grid_units(xu, cfg_x.base_frac_bits, f)?)?;
        let neg = w.is_negative() != x.is_negative();
        match accum {
            AccumMode::Linear => {
                let term = shift_mul_halfexp(p, fmt)?;
                acc = if neg {
                    acc.checked_sub(&term)?
                } else {
                    acc.checked_add(&term)?
                };
            }
            AccumMode::Log => {
                if neg {
                    negative.push(p)
                } else {
                    positive.push(p)
                }
            }
        }
    }
    if accum == AccumMode::Log {
        acc = log_sums_to_linear(&positive, &negative, fmt)?;
    }
    Ok(acc)
}

/// Converts the two signed log-domain partial sums to one linear word.
pub(crate) fn log_sums_to_linear(
    positive: &[ExponentWord],
    negative: &[ExponentWord],
    fmt: &ArithFormat,
) -> Result<AccumulatorWord> {
    let to_linear = |terms: &[ExponentWord]| -> Result<AccumulatorWord> {
        if terms.is_empty() {
            Ok(fmt.zero())
        } else {
            shift_mul_halfexp(log_accumulate(terms)?, fmt)
        }
    };
    to_linear(positive)?.checked_sub(&to_linear(negative)?)
}

/// Log-domain running sum approximating `log2(sum_i 2^p_i)`.
///
/// `s_1 = p_1`, `s_n = max(s_{n-1}, p_n) + 2^-|s_{n-1} - p_n|` where the
/// correction uses `log2(1 + y) ~ y` and is evaluated with the shift-add
/// `2^floor * (1 + frac)` form, so every step is shifts and adds on the
/// exponent word.
pub fn log_accumulate(p: &[ExponentWord]) -> Result<ExponentWord> {
    log_accumulate_with(p, DistanceRule::Fractional)
}

/// [`log_accumulate`] with an explicit distance rule.
pub fn log_accumulate_with(p: &[ExponentWord], rule: DistanceRule) -> Result<ExponentWord> {
    let (first, rest) = p.split_first().ok_or(Error::Empty("log_accumulate"))?;
    let f = first.frac_bits();
    let mut s = *first;
    for term in rest {
        if term.frac_bits() != f {
            return Err(Error::config("mixed exponent word widths"));
        }
        s = log_accumulate_step(s, *term, rule)?;
    }
    Ok(s)
}

/// One accumulation step; ties in `max` keep the running sum.
#[inline]
pub fn log_accumulate_step(
    s: ExponentWord,
    p: ExponentWord,
    rule: DistanceRule,
) -> Result<ExponentWord> {
    let f = s.frac_bits();
    let base = match rule {
        DistanceRule::Fractional => s.raw(),
        DistanceRule::FloorRunningSum => s.floor() << f,
    };
    let distance = (base as i64 - p.raw() as i64).unsigned_abs().min(i32::MAX as u64) as i32;
    let correction = pow2_neg_exponent_raw(distance, f);
    let top = if p.raw() > s.raw() { p } else { s };
    top.checked_add(&ExponentWord::from_raw(correction, f))
}
