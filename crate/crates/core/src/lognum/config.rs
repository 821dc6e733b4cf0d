use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest total bitwidth accepted for log quantizers.
pub const MAX_LOG_BITWIDTH: u8 = 9;
/// Largest total bitwidth accepted for linear quantizers.
pub const MAX_LINEAR_BITWIDTH: u8 = 24;
/// FSR values outside `[-MAX_ABS_FSR, MAX_ABS_FSR]` are rejected.
pub const MAX_ABS_FSR: i32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantKind {
    Log,
    Linear,
}

/// How a value is snapped onto the quantizer grid.
///
/// For log quantizers `FloorMsb` is the leading-one position and `Nearest`
/// rounds in the log domain, i.e. up when the mantissa reaches the geometric
/// midpoint of the octave (`F >= sqrt(2) - 1` for base 2). For linear
/// quantizers they are floor and round-half-away-from-zero of `|x| / step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rounding {
    FloorMsb,
    Nearest,
}

/// Fully determines a quantizer `Q(.)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizerConfig {
    pub kind: QuantKind,
    /// Total bits, including the sign bit when `signed`.
    pub bitwidth: u8,
    pub signed: bool,
    /// Full-scale exponent: the linear-domain full scale is `2^fsr`.
    pub fsr: i32,
    /// Exponent grid step is `2^-base_frac_bits`; 0 selects base 2, 1 base sqrt(2).
    pub base_frac_bits: u8,
    pub rounding: Rounding,
}

impl QuantizerConfig {
    /// Unsigned base-2 log quantizer with round-to-nearest.
    pub fn log(bitwidth: u8, fsr: i32) -> Self {
        Self {
            kind: QuantKind::Log,
            bitwidth,
            signed: false,
            fsr,
            base_frac_bits: 0,
            rounding: Rounding::Nearest,
        }
    }

    /// Unsigned linear quantizer with round-to-nearest.
    pub fn linear(bitwidth: u8, fsr: i32) -> Self {
        Self {
            kind: QuantKind::Linear,
            bitwidth,
            signed: false,
            fsr,
            base_frac_bits: 0,
            rounding: Rounding::Nearest,
        }
    }

    pub fn signed(mut self) -> Self {
        self.signed = true;
        self
    }

    pub fn unsigned(mut self) -> Self {
        self.signed = false;
        self
    }

    pub fn sqrt2(mut self) -> Self {
        self.base_frac_bits = 1;
        self
    }

    pub fn with_base_frac_bits(mut self, bits: u8) -> Self {
        self.base_frac_bits = bits;
        self
    }

    pub fn with_fsr(mut self, fsr: i32) -> Self {
        self.fsr = fsr;
        self
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_bitwidth(mut self, bitwidth: u8) -> Self {
        self.bitwidth = bitwidth;
        self
    }

    pub fn with_kind(mut self, kind: QuantKind) -> Self {
        self.kind = kind;
        if kind == QuantKind::Linear {
            self.base_frac_bits = 0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let min = if self.signed { 2 } else { 1 };
        if self.bitwidth < min {
            return Err(Error::config(format!(
                "bitwidth {} too small (minimum {min} when signed={})",
                self.bitwidth, self.signed
            )));
        }
        let max = match self.kind {
            QuantKind::Log => MAX_LOG_BITWIDTH,
            QuantKind::Linear => MAX_LINEAR_BITWIDTH,
        };
        if self.bitwidth > max {
            return Err(Error::config(format!(
                "bitwidth {} exceeds maximum {max} for {} quantizers",
                self.bitwidth, self.kind
            )));
        }
        if self.base_frac_bits > 1 {
            return Err(Error::config(format!(
                "base_frac_bits {} unsupported (only 0 = base 2 and 1 = base sqrt2)",
                self.base_frac_bits
            )));
        }
        if self.kind == QuantKind::Linear && self.base_frac_bits != 0 {
            return Err(Error::config("linear quantizers have no log base"));
        }
        if self.fsr.abs() > MAX_ABS_FSR {
            return Err(Error::config(format!("fsr {} out of range", self.fsr)));
        }
        Ok(())
    }

    /// Bits of the magnitude field.
    #[inline]
    pub fn mag_bits(&self) -> u32 {
        self.bitwidth as u32 - self.signed as u32
    }

    /// Largest magnitude code, `2^mag_bits - 1`.
    #[inline]
    pub fn max_code(&self) -> u32 {
        (1u32 << self.mag_bits()) - 1
    }

    /// `fsr` expressed in exponent-grid units.
    #[inline]
    pub fn fsr_units(&self) -> i64 {
        (self.fsr as i64) << self.base_frac_bits
    }

    /// Largest representable exponent in grid units (`fsr - step`).
    #[inline]
    pub fn max_exponent_units(&self) -> i64 {
        self.fsr_units() - 1
    }

    /// Smallest representable non-zero exponent in grid units.
    #[inline]
    pub fn min_exponent_units(&self) -> i64 {
        self.fsr_units() - self.max_code() as i64
    }

    /// Linear quantizer step `2^(fsr - mag_bits)`.
    #[inline]
    pub fn linear_step(&self) -> f64 {
        exp2i(self.fsr - self.mag_bits() as i32)
    }

    /// Config with the same structure but the opposite kind at the same FSR.
    pub fn as_kind(&self, kind: QuantKind) -> Self {
        self.with_kind(kind)
    }
}

/// Exact `2^k` for integer `k` (subnormals included, saturating to 0/inf).
#[inline]
pub(crate) fn exp2i(k: i32) -> f64 {
    if k > 1023 {
        f64::INFINITY
    } else if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else if k >= -1074 {
        f64::from_bits(1u64 << (k + 1074))
    } else {
        0.0
    }
}

impl fmt::Display for QuantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantKind::Log => "log",
            QuantKind::Linear => "linear",
        })
    }
}

impl FromStr for QuantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "log" => Ok(QuantKind::Log),
            "linear" | "lin" => Ok(QuantKind::Linear),
            other => Err(Error::config(format!("unknown quantizer kind `{other}`"))),
        }
    }
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::FloorMsb => "floor_msb",
            Rounding::Nearest => "round_nearest_sqrt2",
        })
    }
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "floor_msb" | "floor" => Ok(Rounding::FloorMsb),
            "round_nearest_sqrt2" | "nearest" | "round" => Ok(Rounding::Nearest),
            other => Err(Error::config(format!("unknown rounding mode `{other}`"))),
        }
    }
}

impl fmt::Display for QuantizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = if self.base_frac_bits == 1 { "sqrt2" } else { "2" };
        write!(
            f,
            "{}{}b{} fsr={} base={} {}",
            self.kind,
            self.bitwidth,
            if self.signed { "s" } else { "u" },
            self.fsr,
            base,
            self.rounding
        )
    }
}
