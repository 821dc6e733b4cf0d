//! Matrix kernels over real or coded operands.
//!
//! `gemm_nt` computes `out[r][c] = sum_k a[r][k] * b[c][k]`, dispatching on
//! operand representation: coded x coded uses the method-2 path, real x
//! coded the method-1 path, real x real plain `f64` accumulation. Every
//! output is accumulated sequentially in `k` order, so results are
//! bit-reproducible and match the scalar dot-product functions exactly.

use crate::error::{Error, Result};
use crate::lognum::{
    log_accumulate_step, log_sums_to_linear, shift_by_grid_exponent, shift_raw, AccumMode,
    AccumulatorWord, ArithFormat, DistanceRule, ExponentWord, LogCode, QuantKind,
    QuantizerConfig,
};

const ZERO_UNITS: i32 = i32::MIN;

/// Coded operand unpacked to exponent grid units and signs.
#[derive(Debug, Clone)]
pub(crate) struct PreparedCodes {
    units: Vec<i32>,
    negative: Vec<bool>,
    base_frac_bits: u8,
}

impl PreparedCodes {
    pub fn new(codes: &[LogCode], cfg: &QuantizerConfig) -> Result<Self> {
        if cfg.kind != QuantKind::Log {
            return Err(Error::config(format!("coded operand must be log, got {cfg}")));
        }
        let units = codes
            .iter()
            .map(|c| c.exponent_units(cfg).map_or(ZERO_UNITS, |u| u as i32))
            .collect();
        let negative = codes.iter().map(|c| c.is_negative()).collect();
        Ok(Self {
            units,
            negative,
            base_frac_bits: cfg.base_frac_bits,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }
}

/// Kernel operand: real values or prepared log codes.
#[derive(Debug, Clone)]
pub(crate) enum Operand {
    Real(Vec<f64>),
    Codes(PreparedCodes),
}

impl Operand {
    pub fn codes(codes: &[LogCode], cfg: &QuantizerConfig) -> Result<Self> {
        Ok(Operand::Codes(PreparedCodes::new(codes, cfg)?))
    }

    fn len(&self) -> usize {
        match self {
            Operand::Real(v) => v.len(),
            Operand::Codes(c) => c.len(),
        }
    }
}

/// `a: rows x k`, `b: cols x k`, result `rows x cols` in `f64`.
pub(crate) fn gemm_nt(
    a: &Operand,
    b: &Operand,
    rows: usize,
    cols: usize,
    k: usize,
    fmt: &ArithFormat,
    accum: AccumMode,
) -> Result<Vec<f64>> {
    if a.len() != rows * k || b.len() != cols * k {
        return Err(Error::shape(format!(
            "gemm operands {}x{k} / {}x{k} do not match payloads {} / {}",
            rows,
            cols,
            a.len(),
            b.len()
        )));
    }
    match (a, b) {
        (Operand::Real(x), Operand::Real(y)) => Ok(gemm_real(x, y, rows, cols, k)),
        (Operand::Real(x), Operand::Codes(y)) => gemm_method1(x, y, rows, cols, k, fmt, false),
        (Operand::Codes(x), Operand::Real(y)) => gemm_method1(y, x, cols, rows, k, fmt, true),
        (Operand::Codes(x), Operand::Codes(y)) => match accum {
            AccumMode::Linear => gemm_method2_linear(x, y, rows, cols, k, fmt),
            AccumMode::Log => gemm_method2_log(x, y, rows, cols, k, fmt),
        },
    }
}

fn gemm_real(a: &[f64], b: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ar = &a[r * k..(r + 1) * k];
        for c in 0..cols {
            let bc = &b[c * k..(c + 1) * k];
            let mut acc = 0.0f64;
            for (x, y) in ar.iter().zip(bc) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    out
}

/// Real rows against coded rows. With `transposed`, the output is laid out
/// as `coded_rows x real_rows`.
fn gemm_method1(
    real: &[f64],
    codes: &PreparedCodes,
    real_rows: usize,
    code_rows: usize,
    k: usize,
    fmt: &ArithFormat,
    transposed: bool,
) -> Result<Vec<f64>> {
    let words = real
        .iter()
        .map(|&v| AccumulatorWord::from_f64(v, fmt))
        .collect::<Result<Vec<_>>>()?;
    let scale = (-(fmt.accum_frac_bits as f64)).exp2();
    let mut out = vec![0.0f64; real_rows * code_rows];
    for r in 0..real_rows {
        let wr = &words[r * k..(r + 1) * k];
        for c in 0..code_rows {
            let units = &codes.units[c * k..(c + 1) * k];
            let neg = &codes.negative[c * k..(c + 1) * k];
            let mut acc = fmt.zero();
            for i in 0..k {
                if units[i] == ZERO_UNITS {
                    continue;
                }
                let term = shift_by_grid_exponent(wr[i], units[i] as i64, codes.base_frac_bits)?;
                acc = if neg[i] {
                    acc.checked_sub(&term)?
                } else {
                    acc.checked_add(&term)?
                };
            }
            let idx = if transposed { c * real_rows + r } else { r * code_rows + c };
            out[idx] = acc.raw() as f64 * scale;
        }
    }
    Ok(out)
}

#[inline]
fn exp_raw(units: i32, base_frac_bits: u8, f: u32) -> i32 {
    units << (f - base_frac_bits as u32)
}

fn check_exp_bits(a: &PreparedCodes, b: &PreparedCodes, fmt: &ArithFormat) -> Result<()> {
    fmt.validate()?;
    if a.base_frac_bits as u32 > fmt.exp_frac_bits || b.base_frac_bits as u32 > fmt.exp_frac_bits {
        return Err(Error::config("exponent word too narrow for the operand grids"));
    }
    Ok(())
}

fn gemm_method2_linear(
    a: &PreparedCodes,
    b: &PreparedCodes,
    rows: usize,
    cols: usize,
    k: usize,
    fmt: &ArithFormat,
) -> Result<Vec<f64>> {
    check_exp_bits(a, b, fmt)?;
    let f = fmt.exp_frac_bits;
    let mask = (1i32 << f) - 1;
    let max_raw = fmt.max_raw();
    let scale = (-(fmt.accum_frac_bits as f64)).exp2();
    let a_exp: Vec<i32> = a
        .units
        .iter()
        .map(|&u| if u == ZERO_UNITS { ZERO_UNITS } else { exp_raw(u, a.base_frac_bits, f) })
        .collect();
    let b_exp: Vec<i32> = b
        .units
        .iter()
        .map(|&u| if u == ZERO_UNITS { ZERO_UNITS } else { exp_raw(u, b.base_frac_bits, f) })
        .collect();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ae = &a_exp[r * k..(r + 1) * k];
        let an = &a.negative[r * k..(r + 1) * k];
        for c in 0..cols {
            let be = &b_exp[c * k..(c + 1) * k];
            let bn = &b.negative[c * k..(c + 1) * k];
            let mut acc: i64 = 0;
            for i in 0..k {
                if ae[i] == ZERO_UNITS || be[i] == ZERO_UNITS {
                    continue;
                }
                let p = ae[i] + be[i];
                let mantissa = (1i64 << f) + (p & mask) as i64;
                let shift = (p >> f) - f as i32 + fmt.accum_frac_bits as i32;
                let term = shift_raw(mantissa, shift, max_raw)?;
                acc = if an[i] != bn[i] { acc - term } else { acc + term };
                if acc.unsigned_abs() > max_raw as u64 {
                    return Err(Error::Overflow(format!(
                        "dot product exceeds accumulator range at output ({r}, {c})"
                    )));
                }
            }
            out.push(acc as f64 * scale);
        }
    }
    Ok(out)
}

fn gemm_method2_log(
    a: &PreparedCodes,
    b: &PreparedCodes,
    rows: usize,
    cols: usize,
    k: usize,
    fmt: &ArithFormat,
) -> Result<Vec<f64>> {
    check_exp_bits(a, b, fmt)?;
    let f = fmt.exp_frac_bits;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut pos: Option<ExponentWord> = None;
            let mut neg: Option<ExponentWord> = None;
            for i in 0..k {
                let (ua, ub) = (a.units[r * k + i], b.units[c * k + i]);
                if ua == ZERO_UNITS || ub == ZERO_UNITS {
                    continue;
                }
                let p = ExponentWord::from_raw(
                    exp_raw(ua, a.base_frac_bits, f) + exp_raw(ub, b.base_frac_bits, f),
                    f,
                );
                let slot = if a.negative[r * k + i] != b.negative[c * k + i] {
                    &mut neg
                } else {
                    &mut pos
                };
                *slot = Some(match slot {
                    None => p,
                    Some(s) => log_accumulate_step(*s, p, DistanceRule::Fractional)?,
                });
            }
            let word = log_sums_to_linear(
                pos.as_slice(),
                neg.as_slice(),
                fmt,
            )?;
            out.push(word.to_f64());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lognum::{dot_method1, dot_method2, quantize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_codes(rng: &mut ChaCha8Rng, n: usize, cfg: &QuantizerConfig) -> Vec<LogCode> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-4.0..4.0);
                let v = if cfg.signed { v } else { v.abs() };
                quantize(v, cfg).unwrap()
            })
            .collect()
    }

    #[test]
    fn method2_kernel_matches_scalar_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fmt = ArithFormat::default();
        for (cw, cx) in [
            (QuantizerConfig::log(5, 2).signed(), QuantizerConfig::log(4, 3)),
            (QuantizerConfig::log(5, 2).signed().sqrt2(), QuantizerConfig::log(4, 3)),
        ] {
            let (rows, cols, k) = (3, 4, 17);
            let w = random_codes(&mut rng, rows * k, &cw);
            let x = random_codes(&mut rng, cols * k, &cx);
            for accum in [AccumMode::Linear, AccumMode::Log] {
                let out = gemm_nt(
                    &Operand::codes(&w, &cw).unwrap(),
                    &Operand::codes(&x, &cx).unwrap(),
                    rows,
                    cols,
                    k,
                    &fmt,
                    accum,
                )
                .unwrap();
                for r in 0..rows {
                    for c in 0..cols {
                        let expect = dot_method2(
                            &w[r * k..(r + 1) * k],
                            &x[c * k..(c + 1) * k],
                            &cw,
                            &cx,
                            accum,
                            &fmt,
                        )
                        .unwrap();
                        assert_eq!(out[r * cols + c], expect.to_f64());
                    }
                }
            }
        }
    }

    #[test]
    fn method1_kernel_matches_scalar_dot_both_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fmt = ArithFormat::default();
        let cx = QuantizerConfig::log(4, 3);
        let (rows, cols, k) = (2, 3, 11);
        let w: Vec<f64> = (0..rows * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = random_codes(&mut rng, cols * k, &cx);
        let a = Operand::Real(w.clone());
        let b = Operand::codes(&x, &cx).unwrap();
        let out = gemm_nt(&a, &b, rows, cols, k, &fmt, AccumMode::Linear).unwrap();
        let out_t = gemm_nt(&b, &a, cols, rows, k, &fmt, AccumMode::Linear).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let expect = dot_method1(&w[r * k..(r + 1) * k], &x[c * k..(c + 1) * k], &cx, &fmt).unwrap();
                assert_eq!(out[r * cols + c], expect.to_f64());
                assert_eq!(out_t[c * rows + r], expect.to_f64());
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let cfg = QuantizerConfig::log(4, 20);
        let big = vec![quantize(2f64.powi(19), &cfg).unwrap(); 8];
        let op = Operand::codes(&big, &cfg).unwrap();
        let r = gemm_nt(&op, &op, 1, 1, 8, &ArithFormat::default(), AccumMode::Linear);
        assert!(matches!(r, Err(Error::Overflow(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let r = gemm_nt(
            &Operand::Real(vec![1.0; 3]),
            &Operand::Real(vec![1.0; 4]),
            1,
            1,
            3,
            &ArithFormat::default(),
            AccumMode::Linear,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
