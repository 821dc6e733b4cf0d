//! Exact integer reference for the log and linear quantizers.
//!
//! Every finite `x` is `m * 2^e` with an integer `m`; rounding decisions are
//! made by comparing integer powers of `m` against powers of two, so no
//! floating-point logarithm is involved.

#![allow(dead_code)]

use std::f64::consts::SQRT_2;

use lognet::lognum::{dequantize, linquant, logquant, LogCode, QuantKind, QuantizerConfig, Rounding};
use num_bigint::BigUint;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One input with its exact rounded logarithms precomputed.
pub struct Point {
    pub x: f64,
    mant: u64,
    exp: i64,
    /// `[base_frac_bits][rounding]`, rounding 0 = floor, 1 = nearest.
    units: [[i64; 2]; 2],
}

fn pow_ge_pow2(m: u64, power: u32, two_exp: u64) -> bool {
    BigUint::from(m).pow(power) >= BigUint::from(1u8) << two_exp
}

impl Point {
    pub fn new(x: f64) -> Self {
        let (mant, exp, _) = x.integer_decode();
        let mut p = Point {
            x,
            mant,
            exp: exp as i64,
            units: [[0; 2]; 2],
        };
        if mant != 0 {
            let k = 63 - mant.leading_zeros() as u64;
            let n = k as i64 + exp as i64;
            let half = pow_ge_pow2(mant, 2, 2 * k + 1) as i64;
            let quarter = pow_ge_pow2(mant, 4, 4 * k + 1) as i64;
            let three_quarter = pow_ge_pow2(mant, 4, 4 * k + 3) as i64;
            p.units = [[n, n + half], [2 * n + half, 2 * n + quarter + three_quarter]];
        }
        p
    }

    fn negative(&self, cfg: &QuantizerConfig) -> bool {
        cfg.signed && self.x < 0.0
    }

    /// Input as fed to `cfg`: unsigned configs see `|x|`.
    pub fn input(&self, cfg: &QuantizerConfig) -> f64 {
        if cfg.signed {
            self.x
        } else {
            self.x.abs()
        }
    }

    fn rounding_index(r: Rounding) -> usize {
        match r {
            Rounding::FloorMsb => 0,
            Rounding::Nearest => 1,
        }
    }

    /// Reference log code: round on the exponent grid, clip to `fsr - step`
    /// from above and flush exponents at or below `fsr - 2^mag * step`.
    pub fn log_code(&self, cfg: &QuantizerConfig) -> LogCode {
        if self.mant == 0 {
            return LogCode::ZERO;
        }
        let u = self.units[cfg.base_frac_bits as usize][Self::rounding_index(cfg.rounding)];
        let top = (cfg.fsr as i64) << cfg.base_frac_bits;
        let span = 1i64 << (cfg.bitwidth as i64 - cfg.signed as i64);
        if u <= top - span {
            return LogCode::ZERO;
        }
        LogCode::new(self.negative(cfg), (u.min(top - 1) - (top - span)) as u32)
    }

    /// Reference linear code: `|x| / 2^(fsr - mag)` floored or rounded half
    /// away from zero, clipped to the largest magnitude.
    pub fn linear_code(&self, cfg: &QuantizerConfig) -> LogCode {
        let mag = cfg.bitwidth as i64 - cfg.signed as i64;
        let max = (1u128 << mag) - 1;
        let s = self.exp + mag - cfg.fsr as i64;
        let m = self.mant as u128;
        let steps: u128 = if s >= 0 {
            if 64 - (self.mant.leading_zeros() as i64) + s > 100 {
                u128::MAX
            } else {
                m << s
            }
        } else if -s > 100 {
            0
        } else {
            match cfg.rounding {
                Rounding::FloorMsb => m >> -s,
                Rounding::Nearest => ((m << 1) + (1u128 << -s)) >> (1 - s),
            }
        };
        LogCode::new(self.negative(cfg), steps.min(max) as u32)
    }

    pub fn code(&self, cfg: &QuantizerConfig) -> LogCode {
        match cfg.kind {
            QuantKind::Log => self.log_code(cfg),
            QuantKind::Linear => self.linear_code(cfg),
        }
    }

    /// Reference dequantized value of [`Point::code`].
    pub fn value(&self, cfg: &QuantizerConfig) -> f64 {
        let c = self.code(cfg);
        if c.is_zero() {
            return 0.0;
        }
        let mag = cfg.bitwidth as i32 - cfg.signed as i32;
        let v = match cfg.kind {
            QuantKind::Linear => c.code() as f64 * 2f64.powi(cfg.fsr - mag),
            QuantKind::Log => {
                let u = ((cfg.fsr as i64) << cfg.base_frac_bits) - (1i64 << mag) + c.code() as i64;
                if cfg.base_frac_bits == 0 {
                    2f64.powi(u as i32)
                } else if u % 2 == 0 {
                    2f64.powi((u / 2) as i32)
                } else {
                    2f64.powi(u.div_euclid(2) as i32) * SQRT_2
                }
            }
        };
        if c.is_negative() {
            -v
        } else {
            v
        }
    }
}

/// `n` inputs: zero, powers of two, log-rounding thresholds and linear
/// half-steps with their float neighbours, then seeded log-uniform
/// magnitudes. Every other point is negated.
pub fn input_grid(n: usize, seed: u64) -> Vec<f64> {
    let mut mags = vec![0.0f64];
    let with_neighbours = |v: f64, out: &mut Vec<f64>| {
        out.extend([v, v.next_up(), v.next_down()]);
    };
    for k in -80..=20 {
        for frac in [0.0, 0.25, 0.5, 0.75] {
            with_neighbours(2f64.powf(k as f64 + frac), &mut mags);
        }
    }
    for t in -16..=16 {
        for j in 0..64 {
            with_neighbours((j as f64 + 0.5) * 2f64.powi(t), &mut mags);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while mags.len() < n {
        let t: f64 = rng.random_range(-80.0..20.0);
        mags.push(2f64.powf(t));
    }
    mags.truncate(n);
    mags.iter()
        .enumerate()
        .map(|(i, &m)| if i % 2 == 1 { -m } else { m })
        .collect()
}

/// All configs with total bitwidth up to 6, FSR in `[-8, 16]`, both bases
/// (log only) and both roundings.
pub fn oracle_configs() -> Vec<QuantizerConfig> {
    let mut out = Vec::new();
    for kind in [QuantKind::Log, QuantKind::Linear] {
        for signed in [false, true] {
            for bitwidth in (1 + signed as u8)..=6 {
                for fsr in -8..=16 {
                    for base_frac_bits in 0..=(kind == QuantKind::Log) as u8 {
                        for rounding in [Rounding::FloorMsb, Rounding::Nearest] {
                            out.push(QuantizerConfig {
                                kind,
                                bitwidth,
                                signed,
                                fsr,
                                base_frac_bits,
                                rounding,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Compares the library against the reference on every point and config.
/// Returns the number of comparisons and up to `limit` mismatch reports.
pub fn compare_all(points: &[Point], configs: &[QuantizerConfig], limit: usize) -> (u64, Vec<String>) {
    let mut checked = 0u64;
    let mut bad = Vec::new();
    for cfg in configs {
        for p in points {
            let x = p.input(cfg);
            let got = match cfg.kind {
                QuantKind::Log => logquant(x, cfg),
                QuantKind::Linear => linquant(x, cfg),
            }
            .expect("valid input");
            let want = p.code(cfg);
            let (gv, wv) = (dequantize(got, cfg), p.value(cfg));
            checked += 1;
            if (got != want || gv.to_bits() != wv.to_bits()) && bad.len() < limit {
                bad.push(format!("{cfg} x={x:e}: got {got:?} ({gv}), want {want:?} ({wv})"));
            }
        }
    }
    (checked, bad)
}
