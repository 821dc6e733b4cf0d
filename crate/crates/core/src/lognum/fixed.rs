//! Fixed-point words and the shift-only primitives built on them.

use crate::error::{Error, Result};

/// Word widths for the fixed-point datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArithFormat {
    /// Integer bits of the accumulator, excluding sign.
    pub accum_int_bits: u32,
    /// Fractional bits of the accumulator.
    pub accum_frac_bits: u32,
    /// Fractional bits of exponent words (log-domain sums).
    pub exp_frac_bits: u32,
}

impl Default for ArithFormat {
    fn default() -> Self {
        Self {
            accum_int_bits: 32,
            accum_frac_bits: 8,
            exp_frac_bits: 4,
        }
    }
}

impl ArithFormat {
    /// Wide format used by the trainer, where gradients need deep fractions.
    pub fn wide() -> Self {
        Self {
            accum_int_bits: 22,
            accum_frac_bits: 40,
            exp_frac_bits: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accum_int_bits + self.accum_frac_bits > 62 {
            return Err(Error::config(format!(
                "accumulator {}.{} exceeds 62 magnitude bits",
                self.accum_int_bits, self.accum_frac_bits
            )));
        }
        if !(1..=16).contains(&self.exp_frac_bits) {
            return Err(Error::config("exponent word needs 1..=16 fractional bits"));
        }
        Ok(())
    }

    /// Largest raw accumulator magnitude.
    #[inline]
    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.accum_int_bits + self.accum_frac_bits)) - 1
    }

    /// Checks that `terms` additions of `2^max_exponent` fit the accumulator.
    pub fn check_headroom(&self, max_exponent: i64, terms: usize) -> Result<()> {
        let term_bits = max_exponent + 1;
        let count_bits = usize::BITS as i64 - (terms.max(1) - 1).leading_zeros() as i64;
        if term_bits + count_bits > self.accum_int_bits as i64 {
            return Err(Error::overflow(format!(
                "{terms} terms of 2^{max_exponent} need {} integer bits, accumulator has {}",
                term_bits + count_bits,
                self.accum_int_bits
            )));
        }
        Ok(())
    }

    pub fn zero(&self) -> AccumulatorWord {
        AccumulatorWord {
            raw: 0,
            frac_bits: self.accum_frac_bits as u8,
            max_raw: self.max_raw(),
        }
    }
}

/// Signed fixed-point accumulator word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumulatorWord {
    raw: i64,
    frac_bits: u8,
    max_raw: i64,
}

impl AccumulatorWord {
    pub fn from_raw(raw: i64, fmt: &ArithFormat) -> Result<Self> {
        let w = fmt.zero();
        if raw.unsigned_abs() > w.max_raw as u64 {
            return Err(Error::overflow(format!("raw word {raw} out of range")));
        }
        Ok(Self { raw, ..w })
    }

    pub fn from_int(v: i64, fmt: &ArithFormat) -> Result<Self> {
        fmt.zero().bitshift_raw(v, fmt.accum_frac_bits as i32)
    }

    /// Nearest representable word (ties away from zero).
    pub fn from_f64(v: f64, fmt: &ArithFormat) -> Result<Self> {
        let scaled = (v * (fmt.accum_frac_bits as f64).exp2()).round();
        if !scaled.is_finite() || scaled.abs() > fmt.max_raw() as f64 {
            return Err(Error::overflow(format!("{v} does not fit the accumulator")));
        }
        Self::from_raw(scaled as i64, fmt)
    }

    #[inline]
    pub fn raw(&self) -> i64 {
        self.raw
    }

    #[inline]
    pub fn frac_bits(&self) -> u32 {
        self.frac_bits as u32
    }

    #[inline]
    pub fn to_f64(&self) -> f64 {
        self.raw as f64 * (-(self.frac_bits as f64)).exp2()
    }

    #[inline]
    fn with_raw(&self, raw: i64) -> Result<Self> {
        if raw.unsigned_abs() > self.max_raw as u64 {
            return Err(Error::overflow(format!(
                "value {} exceeds accumulator range",
                raw as f64 * (-(self.frac_bits as f64)).exp2()
            )));
        }
        Ok(Self { raw, ..*self })
    }

    #[inline]
    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        let raw = self
            .raw
            .checked_add(other.raw)
            .ok_or_else(|| Error::overflow("accumulator add"))?;
        self.with_raw(raw)
    }

    #[inline]
    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        let raw = self
            .raw
            .checked_sub(other.raw)
            .ok_or_else(|| Error::overflow("accumulator sub"))?;
        self.with_raw(raw)
    }

    #[inline]
    pub fn neg(&self) -> Self {
        Self {
            raw: -self.raw,
            ..*self
        }
    }

    /// `raw * 2^shift` as a word in this format.
    #[inline]
    fn bitshift_raw(&self, raw: i64, shift: i32) -> Result<Self> {
        self.with_raw(shift_raw(raw, shift, self.max_raw)?)
    }
}

/// Shifts a raw two's-complement word. Right shifts drop bits (toward -inf).
#[inline]
pub(crate) fn shift_raw(raw: i64, shift: i32, max_raw: i64) -> Result<i64> {
    if shift >= 0 {
        if raw == 0 {
            return Ok(0);
        }
        let s = shift as u32;
        if s >= 63 || raw.unsigned_abs() > (max_raw as u64) >> s {
            return Err(Error::overflow(format!("shift of {raw} by {shift}")));
        }
        Ok(raw << s)
    } else {
        Ok(raw >> (-shift).min(63) as u32)
    }
}

/// `a * 2^b` by shifting the word.
pub fn bitshift(a: AccumulatorWord, b: i32) -> Result<AccumulatorWord> {
    a.bitshift_raw(a.raw, b)
}

/// Signed fixed-point exponent word holding log-domain values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExponentWord {
    raw: i32,
    frac_bits: u8,
}

impl ExponentWord {
    pub fn from_raw(raw: i32, frac_bits: u32) -> Self {
        Self {
            raw,
            frac_bits: frac_bits as u8,
        }
    }

    pub fn from_int(v: i32, frac_bits: u32) -> Self {
        Self::from_raw(v << frac_bits, frac_bits)
    }

    /// Exponent of `units * 2^-base_frac_bits`.
    pub fn from_grid_units(units: i64, base_frac_bits: u8, frac_bits: u32) -> Result<Self> {
        if (base_frac_bits as u32) > frac_bits {
            return Err(Error::config(format!(
                "exponent word with {frac_bits} fractional bits cannot hold a grid of step 2^-{base_frac_bits}"
            )));
        }
        let raw = units << (frac_bits - base_frac_bits as u32);
        let raw = i32::try_from(raw).map_err(|_| Error::overflow("exponent word"))?;
        Ok(Self::from_raw(raw, frac_bits))
    }

    /// Truncates `v` toward -inf onto the word grid.
    pub fn from_f64(v: f64, frac_bits: u32) -> Self {
        Self::from_raw((v * (frac_bits as f64).exp2()).floor() as i32, frac_bits)
    }

    #[inline]
    pub fn raw(&self) -> i32 {
        self.raw
    }

    #[inline]
    pub fn frac_bits(&self) -> u32 {
        self.frac_bits as u32
    }

    /// Integer part, `floor(e)`.
    #[inline]
    pub fn floor(&self) -> i32 {
        self.raw >> self.frac_bits
    }

    /// Fraction bits, `frac(e) * 2^frac_bits`.
    #[inline]
    pub fn frac_raw(&self) -> i32 {
        self.raw & ((1 << self.frac_bits) - 1)
    }

    #[inline]
    pub fn to_f64(&self) -> f64 {
        self.raw as f64 / (1u32 << self.frac_bits) as f64
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        debug_assert_eq!(self.frac_bits, other.frac_bits);
        let raw = self
            .raw
            .checked_add(other.raw)
            .ok_or_else(|| Error::overflow("exponent word add"))?;
        Ok(Self::from_raw(raw, self.frac_bits()))
    }
}

/// `floor(log2 x)` from the position of the leading one bit.
pub fn log2_floor(x: AccumulatorWord) -> Result<i32> {
    if x.raw <= 0 {
        return Err(Error::Domain(format!("log2 of non-positive {}", x.to_f64())));
    }
    Ok(msb_position(x.raw as u64) as i32 - x.frac_bits() as i32)
}

#[inline]
fn msb_position(v: u64) -> u32 {
    63 - v.leading_zeros()
}

/// `ceil((sqrt(2) - 1) * 2^m)`: the rounding threshold as an `m`-bit fraction.
pub fn sqrt2_threshold(m: u32) -> u64 {
    assert!((1..=62).contains(&m), "threshold width {m} unsupported");
    // ceil(sqrt(2) * 2^m) = isqrt(2^(2m+1)) + 1 since sqrt(2) * 2^m is irrational
    let ceil_root = (1u128 << (2 * m + 1)).isqrt() + 1;
    (ceil_root - (1u128 << m)) as u64
}

/// `floor(log2 x)` rounded up when the `m` bits after the leading one, read
/// as a fraction `F`, satisfy `F >= sqrt(2) - 1`.
pub fn log2_round(x: AccumulatorWord, m: u32) -> Result<i32> {
    if m == 0 || m > 62 {
        return Err(Error::Domain(format!("mantissa width {m} out of range 1..=62")));
    }
    let floor = log2_floor(x)?;
    let v = x.raw as u64;
    let msb = msb_position(v);
    let mask = (1u64 << m) - 1;
    let f = if msb >= m {
        (v >> (msb - m)) & mask
    } else {
        (v << (m - msb)) & mask
    };
    Ok(floor + (f >= sqrt2_threshold(m)) as i32)
}

/// Shift-add approximation `2^floor(e) * (1 + frac(e))` of `2^e`.
///
/// The `(1 + frac)` mantissa is placed as an integer and shifted once, so
/// the only truncation is the final right shift.
pub fn shift_mul_halfexp(e: ExponentWord, fmt: &ArithFormat) -> Result<AccumulatorWord> {
    let f = e.frac_bits() as i32;
    let mantissa = (1i64 << f) + e.frac_raw() as i64;
    let word = fmt.zero();
    let shift = e.floor() - f + fmt.accum_frac_bits as i32;
    word.bitshift_raw(mantissa, shift)
}

/// `2^-d` for `d >= 0` in exponent-word precision using the same
/// shift-add approximation, truncated to the word grid.
#[inline]
pub(crate) fn pow2_neg_exponent_raw(d_raw: i32, frac_bits: u32) -> i32 {
    debug_assert!(d_raw >= 0);
    let neg = -d_raw;
    let floor = neg >> frac_bits;
    let frac = neg & ((1 << frac_bits) - 1);
    let mantissa = (1i32 << frac_bits) + frac;
    // value * 2^f = mantissa * 2^floor, floor <= 0
    let shift = (-floor).min(31) as u32;
    mantissa >> shift
}
