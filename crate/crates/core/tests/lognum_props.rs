use lognet::lognum::{
    dequantize, dot_method1, dot_method2, log2_floor, log2_round, log_accumulate, quantize,
    shift_mul_halfexp, AccumMode, AccumulatorWord, ArithFormat, ExponentWord, LogCode,
    QuantizerConfig, Rounding,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn any_config() -> impl Strategy<Value = QuantizerConfig> {
    (any::<bool>(), any::<bool>(), 0u8..2, -12i32..20, any::<bool>(), 2u8..=8).prop_map(
        |(log, signed, bfb, fsr, nearest, bitwidth)| {
            let base = if log {
                QuantizerConfig::log(bitwidth, fsr).with_base_frac_bits(bfb)
            } else {
                QuantizerConfig::linear(bitwidth, fsr)
            };
            let base = if signed { base.signed() } else { base };
            base.with_rounding(if nearest { Rounding::Nearest } else { Rounding::FloorMsb })
        },
    )
}

fn magnitude() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), (-40.0f64..30.0).prop_map(f64::exp2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn requantizing_is_idempotent(cfg in any_config(), m in magnitude(), neg in any::<bool>()) {
        let x = if neg && cfg.signed { -m } else { m };
        let c = quantize(x, &cfg).unwrap();
        prop_assert_eq!(quantize(dequantize(c, &cfg), &cfg).unwrap(), c);
    }

    #[test]
    fn quantizers_are_monotone(cfg in any_config(), a in magnitude(), b in magnitude()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let q = |x| dequantize(quantize(x, &cfg).unwrap(), &cfg);
        prop_assert!(q(lo) <= q(hi));
        if cfg.signed {
            prop_assert!(q(-hi) <= q(-lo));
        }
    }

    #[test]
    fn dequantized_magnitude_never_exceeds_top(cfg in any_config(), m in magnitude()) {
        let v = dequantize(quantize(m, &cfg).unwrap(), &cfg);
        prop_assert!(v <= (cfg.fsr as f64).exp2());
    }
}

fn random_power_terms(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<LogCode>, Vec<LogCode>) {
    let w_real = (0..n)
        .map(|_| {
            let v = (rng.random_range(-6i32..=6) as f64).exp2();
            if rng.random_bool(0.5) { -v } else { v }
        })
        .collect();
    let codes = |rng: &mut ChaCha8Rng, signed: bool| -> Vec<LogCode> {
        (0..n)
            .map(|_| LogCode::new(signed && rng.random_bool(0.5), rng.random_range(0..16)))
            .collect()
    };
    let x = codes(rng, false);
    let w = codes(rng, true);
    (w_real, x, w)
}

#[test]
fn power_of_two_dot_products_are_exact() {
    let fmt = ArithFormat::wide();
    let cfg_x = QuantizerConfig::log(4, 4);
    let cfg_w = QuantizerConfig::log(5, 2).signed();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let n = rng.random_range(1..=64);
        let (w_real, x, w) = random_power_terms(&mut rng, n);
        let exact1: f64 = w_real.iter().zip(&x).map(|(a, c)| a * dequantize(*c, &cfg_x)).sum();
        assert_eq!(dot_method1(&w_real, &x, &cfg_x, &fmt).unwrap().to_f64(), exact1);
        let exact2: f64 = w
            .iter()
            .zip(&x)
            .map(|(a, c)| dequantize(*a, &cfg_w) * dequantize(*c, &cfg_x))
            .sum();
        let got = dot_method2(&w, &x, &cfg_w, &cfg_x, AccumMode::Linear, &fmt).unwrap();
        assert_eq!(got.to_f64(), exact2);
    }
}

#[test]
fn zero_codes_contribute_nothing() {
    let fmt = ArithFormat::default();
    let cfg = QuantizerConfig::log(4, 4);
    let cfg_w = cfg.signed();
    let x = [LogCode::ZERO, LogCode::positive(9)];
    let w = [LogCode::positive(15), LogCode::ZERO];
    for mode in [AccumMode::Linear, AccumMode::Log] {
        assert_eq!(dot_method2(&w, &x, &cfg_w, &cfg, mode, &fmt).unwrap().raw(), 0);
    }
    assert_eq!(dot_method1(&[1e3, 0.0], &x, &cfg, &fmt).unwrap().raw(), 0);
}

#[test]
fn shift_mul_halfexp_stays_within_linear_bound() {
    let fmt = ArithFormat::wide();
    for f in 1..=8u32 {
        let bound = 0.0861 + (-(f as f64)).exp2();
        for raw in (-8i32 << f)..(20i32 << f) {
            let e = ExponentWord::from_raw(raw, f);
            let v = shift_mul_halfexp(e, &fmt).unwrap().to_f64();
            let err = (v.log2() - e.to_f64()).abs();
            assert!(err <= bound, "f={f} e={} err={err}", e.to_f64());
        }
    }
}

#[test]
fn log_accumulation_step_error_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let f = 4;
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let a = rng.random_range(-(20 << f)..(20 << f));
        let b = (a + rng.random_range(-(16 << f)..=(16 << f))).clamp(-(40 << f), 40 << f);
        let (pa, pb) = (ExponentWord::from_raw(a, f), ExponentWord::from_raw(b, f));
        let got = log_accumulate(&[pa, pb]).unwrap().to_f64();
        let exact = (pa.to_f64().exp2() + pb.to_f64().exp2()).log2();
        worst = worst.max((got - exact).abs());
    }
    assert!(worst <= 0.15, "worst step error {worst}");
}

#[test]
fn log_accumulation_sequence_error_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let f = 4;
    for _ in 0..10_000 {
        let p: Vec<ExponentWord> = (0..64)
            .map(|_| ExponentWord::from_raw(rng.random_range(-(10 << f)..(10 << f)), f))
            .collect();
        let exact = p.iter().map(|e| e.to_f64().exp2()).sum::<f64>().log2();
        let got = log_accumulate(&p).unwrap().to_f64();
        assert!((got - exact).abs() <= 64.0 * 0.15);
    }
}

#[test]
fn log2_floor_is_leading_one() {
    let fmt = ArithFormat::default();
    for raw in 1i64..5000 {
        let w = AccumulatorWord::from_raw(raw, &fmt).unwrap();
        let want = (63 - raw.leading_zeros() as i32) - 8;
        assert_eq!(log2_floor(w).unwrap(), want);
    }
    assert!(log2_floor(fmt.zero()).is_err());
}

/// `log2_round` differs from exact log-domain rounding exactly when
/// truncating the fraction to `m` bits drops it below `sqrt(2) - 1`.
#[test]
fn log2_round_disagrees_only_on_truncation_straddle() {
    let fmt = ArithFormat::default();
    for m in 1..=8u32 {
        for raw in 1i64..(1 << 14) {
            let w = AccumulatorWord::from_raw(raw, &fmt).unwrap();
            let msb = 63 - raw.leading_zeros();
            let n = msb as i32 - 8;
            let exact_up = (raw as i128).pow(2) >= 1i128 << (2 * msb + 1);
            let fm = if msb >= m { (raw >> (msb - m)) & ((1 << m) - 1) } else { (raw << (m - msb)) & ((1 << m) - 1) };
            let trunc_up = (((1i128 << m) + fm as i128).pow(2)) >= 1i128 << (2 * m + 1);
            let got = log2_round(w, m).unwrap();
            assert_eq!(got, n + trunc_up as i32, "m={m} raw={raw}");
            let disagree = got != n + exact_up as i32;
            assert_eq!(disagree, exact_up && !trunc_up, "m={m} raw={raw}");
        }
    }
}

