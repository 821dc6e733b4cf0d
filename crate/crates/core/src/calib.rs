//! FSR calibration and quantization-error analysis.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::lognum::{quantize_unchecked, dequantize, QuantKind, QuantizerConfig};
use crate::nn::{forward_observed, Activation, ForwardOptions, ModelGraph, Mode};
use crate::tensor::Tensor;

/// FSR candidates searched when none are given.
pub const DEFAULT_FSR_GRID: RangeInclusive<i32> = -10..=20;
/// Bins of [`error_histogram`] used in reports.
pub const HISTOGRAM_BINS: usize = 256;
/// Samples drawn from a dataset for model calibration by default.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 100;

fn check_sample(x: &[f32], cfg: &QuantizerConfig) -> Result<()> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::Empty("calibration sample"));
    }
    for &v in x {
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite sample value {v}")));
        }
        if v < 0.0 && !cfg.signed {
            return Err(Error::NegativeUnsigned(v as f64));
        }
    }
    Ok(())
}

/// Ascending copy, so that sums do not depend on sample order.
fn sorted(x: &[f32]) -> Vec<f32> {
    let mut v = x.to_vec();
    v.sort_unstable_by(f32::total_cmp);
    v
}

fn l1_unchecked(x: &[f32], cfg: &QuantizerConfig) -> f64 {
    let sum: f64 = x
        .iter()
        .map(|&v| {
            let v = v as f64;
            (dequantize(quantize_unchecked(v, cfg), cfg) - v).abs()
        })
        .sum();
    sum / x.len() as f64
}

/// Mean absolute quantization error `(1/N) sum |Q(x) - x|`, summed in
/// ascending order of `x`.
pub fn quant_error_l1(x: &[f32], cfg: &QuantizerConfig) -> Result<f64> {
    check_sample(x, cfg)?;
    Ok(l1_unchecked(&sorted(x), cfg))
}

/// Mean L1 error of every candidate FSR and the minimizing one.
#[derive(Debug, Clone, PartialEq)]
pub struct FsrScan {
    pub template: QuantizerConfig,
    /// `(fsr, mean L1 error)` in grid order.
    pub errors: Vec<(i32, f64)>,
    pub fsr: i32,
    pub error: f64,
}

impl FsrScan {
    /// The template at the chosen FSR.
    pub fn chosen(&self) -> QuantizerConfig {
        self.template.with_fsr(self.fsr)
    }
}

/// Evaluates every FSR of `grid`; ties go to the smaller FSR.
pub fn scan_fsr(x: &[f32], template: &QuantizerConfig, grid: RangeInclusive<i32>) -> Result<FsrScan> {
    if grid.is_empty() {
        return Err(Error::config("empty FSR grid"));
    }
    for fsr in [*grid.start(), *grid.end()] {
        template.with_fsr(fsr).validate()?;
    }
    check_sample(x, template)?;
    let x = sorted(x);
    let errors: Vec<(i32, f64)> = grid
        .map(|fsr| (fsr, l1_unchecked(&x, &template.with_fsr(fsr))))
        .collect();
    let (fsr, error) = errors
        .iter()
        .copied()
        .fold(None, |best: Option<(i32, f64)>, (f, e)| match best {
            Some((_, be)) if be <= e => best,
            _ => Some((f, e)),
        })
        .expect("grid is non-empty");
    Ok(FsrScan {
        template: *template,
        errors,
        fsr,
        error,
    })
}

/// FSR of `grid` minimizing the mean L1 quantization error of `x`.
pub fn calibrate_fsr(x: &[f32], template: &QuantizerConfig, grid: RangeInclusive<i32>) -> Result<i32> {
    Ok(scan_fsr(x, template, grid)?.fsr)
}

/// Counts of signed errors `Q(x) - x` in uniform bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges; bin `i` is `[edges[i], edges[i + 1])`,
    /// the last bin closed.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the bin holding 0.
    pub fn zero_bin(&self) -> usize {
        self.bin_of(0.0)
    }

    fn bin_of(&self, e: f64) -> usize {
        let bins = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        let i = ((e - lo) / (hi - lo) * bins as f64).floor();
        (i.max(0.0) as usize).min(bins - 1)
    }
}

/// Histogram of `Q(x) - x` over `[-m, m]` with `m = max |Q(x) - x|`, or over
/// `[-1, 1]` when every error is zero.
pub fn error_histogram(x: &[f32], cfg: &QuantizerConfig, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    check_sample(x, cfg)?;
    let errs: Vec<f64> = x
        .iter()
        .map(|&v| dequantize(quantize_unchecked(v as f64, cfg), cfg) - v as f64)
        .collect();
    let m = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let m = if m > 0.0 { m } else { 1.0 };
    let edges = (0..=bins)
        .map(|i| -m + 2.0 * m * i as f64 / bins as f64)
        .collect();
    let mut h = Histogram {
        edges,
        counts: vec![0; bins],
    };
    for e in errs {
        let i = h.bin_of(e);
        h.counts[i] += 1;
    }
    Ok(h)
}

/// Calibration of one quantizer layer. The scan of the layer's own kind is
/// always present; the other kind is scanned for comparison when its
/// bitwidth is supported.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub layer: usize,
    pub kind: QuantKind,
    pub log: Option<FsrScan>,
    pub linear: Option<FsrScan>,
    /// Chosen FSR minus the graph's global FSR.
    pub offset: i32,
    /// Errors of the layer's own kind at the chosen FSR.
    pub histogram: Histogram,
}

impl LayerCalibration {
    pub fn chosen(&self) -> &FsrScan {
        match self.kind {
            QuantKind::Log => self.log.as_ref(),
            QuantKind::Linear => self.linear.as_ref(),
        }
        .expect("own kind is always scanned")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub global_fsr: i32,
    pub samples: usize,
    pub layers: Vec<LayerCalibration>,
}

impl CalibrationReport {
    /// Writes the chosen offsets, and bitwidths when overridden, into `g`.
    pub fn apply(&self, g: &mut ModelGraph) -> Result<()> {
        for l in &self.layers {
            let target = g
                .layers
                .get_mut(l.layer)
                .ok_or_else(|| Error::config(format!("no layer {}", l.layer)))?;
            target.quant = Some(l.chosen().template.with_fsr(0));
            target.fsr_offset = l.offset;
        }
        g.validate()
    }
}

/// Values reaching each quantizer layer of `g` in a float pass over
/// `inputs`, as `(layer index, values)` in layer order.
pub fn quantizer_inputs(g: &ModelGraph, inputs: &Tensor) -> Result<Vec<(usize, Vec<f32>)>> {
    let mut taps = Vec::new();
    forward_observed(g, inputs, &ForwardOptions::new(Mode::Float32), |i, act| {
        if g.layers[i].kind.is_quantizer() {
            let data = match act {
                Activation::Real(t) => t.data().to_vec(),
                Activation::Codes(q) => q.dequantize().into_data(),
            };
            taps.push((i, data));
        }
    })?;
    Ok(taps)
}

/// Calibrates every quantizer layer of `g` on the activations reaching it
/// in a float pass over `inputs`. `bitwidth` replaces the layers' own.
pub fn calibrate_model(
    g: &ModelGraph,
    inputs: &Tensor,
    bitwidth: Option<u8>,
    grid: RangeInclusive<i32>,
) -> Result<CalibrationReport> {
    if inputs.is_empty() {
        return Err(Error::Empty("calibration inputs"));
    }
    let taps = quantizer_inputs(g, inputs)?;
    let mut layers = Vec::with_capacity(taps.len());
    for (i, x) in taps {
        let mut own = g.layers[i].quant.expect("validated quantizer layer");
        if let Some(bw) = bitwidth {
            own = own.with_bitwidth(bw);
        }
        let scan = |kind| -> Result<FsrScan> {
            scan_fsr(&x, &own.with_kind(kind), grid.clone())
                .map_err(|e| Error::config(format!("layer {i}: {e}")))
        };
        let other_kind = match own.kind {
            QuantKind::Log => QuantKind::Linear,
            QuantKind::Linear => QuantKind::Log,
        };
        let mine = scan(own.kind)?;
        let other = if own.with_kind(other_kind).validate().is_ok() {
            Some(scan(other_kind)?)
        } else {
            None
        };
        let histogram = error_histogram(&x, &mine.chosen(), HISTOGRAM_BINS)?;
        let offset = mine.fsr - g.global_fsr;
        let (log, linear) = match own.kind {
            QuantKind::Log => (Some(mine), other),
            QuantKind::Linear => (other, Some(mine)),
        };
        layers.push(LayerCalibration {
            layer: i,
            kind: own.kind,
            log,
            linear,
            offset,
            histogram,
        });
    }
    Ok(CalibrationReport {
        global_fsr: g.global_fsr,
        samples: inputs.shape()[0],
        layers,
    })
}
