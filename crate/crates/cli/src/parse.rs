use std::ops::RangeInclusive;

use lognet::lognum::{QuantKind, QuantizerConfig, Rounding};

/// Inclusive integer range `a:b`; a single `a` means `a:a`.
pub fn fsr_range(s: &str) -> Result<RangeInclusive<i32>, String> {
    let (a, b) = s.split_once(':').unwrap_or((s, s));
    let int = |t: &str| t.trim().parse::<i32>().map_err(|e| format!("`{t}`: {e}"));
    let (a, b) = (int(a)?, int(b)?);
    if a > b {
        return Err(format!("empty FSR range {a}:{b}"));
    }
    Ok(a..=b)
}

/// Quantizer family selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Family {
    Log,
    #[value(name = "log_sqrt2")]
    LogSqrt2,
    Linear,
}

impl Family {
    pub fn apply(self, q: QuantizerConfig) -> QuantizerConfig {
        match self {
            Family::Log => q.with_kind(QuantKind::Log).with_base_frac_bits(0),
            Family::LogSqrt2 => q.with_kind(QuantKind::Log).with_base_frac_bits(1),
            Family::Linear => q.with_kind(QuantKind::Linear).with_base_frac_bits(0),
        }
    }
}

/// Quantizer written as colon-separated tokens: a family (`log`,
/// `log_sqrt2`, `linear`), the bitwidth, and optionally `signed` or
/// `unsigned`, `floor` or `nearest`, and `fsr=N`. `none` disables it.
///
/// `log:5:signed:floor` is a 5b signed base-2 log quantizer rounding toward
/// zero.
pub fn quantizer(s: &str) -> Result<Option<QuantizerConfig>, String> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let mut tokens = s.split(':').map(str::trim);
    let family = tokens.next().unwrap_or_default();
    let family = <Family as clap::ValueEnum>::from_str(family, true)
        .map_err(|_| format!("unknown quantizer family `{family}` (expected log, log_sqrt2, linear or none)"))?;
    let bitwidth: u8 = tokens
        .next()
        .ok_or("missing bitwidth")?
        .parse()
        .map_err(|e| format!("bitwidth: {e}"))?;
    let mut q = family.apply(QuantizerConfig::log(bitwidth, 0));
    for t in tokens {
        match t {
            "signed" => q = q.signed(),
            "unsigned" => q = q.unsigned(),
            "floor" => q = q.with_rounding(Rounding::FloorMsb),
            "nearest" => q = q.with_rounding(Rounding::Nearest),
            _ => match t.strip_prefix("fsr=") {
                Some(v) => q = q.with_fsr(v.parse().map_err(|e| format!("fsr: {e}"))?),
                None => return Err(format!("unknown quantizer option `{t}`")),
            },
        }
    }
    q.validate().map_err(|e| e.to_string())?;
    Ok(Some(q))
}
