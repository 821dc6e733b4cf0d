use crate::error::{Error, Result};

use super::config::{QuantKind, QuantizerConfig};

/// Sign-magnitude quantizer code.
///
/// Magnitude 0 is the reserved zero code. For log quantizers magnitude `c`
/// in `1..=max_code` encodes the exponent `fsr - (2^mag_bits - c) * step`;
/// for linear quantizers it counts steps. The zero code is always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LogCode {
    negative: bool,
    code: u32,
}

impl LogCode {
    pub const ZERO: LogCode = LogCode {
        negative: false,
        code: 0,
    };

    /// Builds a code, normalising a negative zero to the zero code.
    #[inline]
    pub fn new(negative: bool, code: u32) -> Self {
        LogCode {
            negative: negative && code != 0,
            code,
        }
    }

    #[inline]
    pub fn positive(code: u32) -> Self {
        Self::new(false, code)
    }

    #[inline]
    pub fn is_zero(&self) -> bool {
        self.code == 0
    }

    #[inline]
    pub fn is_negative(&self) -> bool {
        self.negative
    }

    /// `+1` or `-1`.
    #[inline]
    pub fn sign(&self) -> i8 {
        if self.negative {
            -1
        } else {
            1
        }
    }

    #[inline]
    pub fn code(&self) -> u32 {
        self.code
    }

    /// Builds the log code whose exponent is `units` (grid units) under `cfg`.
    pub fn from_exponent_units(negative: bool, units: i64, cfg: &QuantizerConfig) -> Result<Self> {
        if units < cfg.min_exponent_units() || units > cfg.max_exponent_units() {
            return Err(Error::Domain(format!(
                "exponent {units} outside [{}, {}] for {cfg}",
                cfg.min_exponent_units(),
                cfg.max_exponent_units()
            )));
        }
        let code = (units - cfg.fsr_units() + (1i64 << cfg.mag_bits())) as u32;
        Ok(Self::new(negative, code))
    }

    /// Exponent of a log code in grid units, `None` for the zero code.
    #[inline]
    pub fn exponent_units(&self, cfg: &QuantizerConfig) -> Option<i64> {
        if self.code == 0 {
            None
        } else {
            Some(cfg.fsr_units() - ((1i64 << cfg.mag_bits()) - self.code as i64))
        }
    }

    /// Checks that the code fits `cfg`.
    pub fn check(&self, cfg: &QuantizerConfig) -> Result<()> {
        if self.code > cfg.max_code() {
            return Err(Error::Domain(format!(
                "code {} exceeds {} magnitude bits",
                self.code,
                cfg.mag_bits()
            )));
        }
        if self.negative && !cfg.signed {
            return Err(Error::Domain("negative code for unsigned quantizer".into()));
        }
        if cfg.kind == QuantKind::Linear && cfg.base_frac_bits != 0 {
            return Err(Error::config("linear quantizers have no log base"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_positive() {
        let z = LogCode::new(true, 0);
        assert!(z.is_zero());
        assert!(!z.is_negative());
        assert_eq!(z, LogCode::ZERO);
        assert_eq!(z.sign(), 1);
    }

    #[test]
    fn exponent_layout() {
        let cfg = QuantizerConfig::log(3, 5);
        assert_eq!(LogCode::positive(7).exponent_units(&cfg), Some(4));
        assert_eq!(LogCode::positive(1).exponent_units(&cfg), Some(-2));
        assert_eq!(LogCode::ZERO.exponent_units(&cfg), None);
        let c = LogCode::from_exponent_units(false, 2, &cfg).unwrap();
        assert_eq!(c.code(), 5);
        assert!(LogCode::from_exponent_units(false, 5, &cfg).is_err());
        assert!(LogCode::from_exponent_units(false, -3, &cfg).is_err());
    }

    #[test]
    fn check_against_config() {
        let cfg = QuantizerConfig::log(3, 0);
        assert!(LogCode::positive(7).check(&cfg).is_ok());
        assert!(LogCode::positive(8).check(&cfg).is_err());
        assert!(LogCode::new(true, 1).check(&cfg).is_err());
        assert!(LogCode::new(true, 3).check(&cfg.signed()).is_ok());
    }
}
