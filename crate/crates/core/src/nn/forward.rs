//! Inference over a [`ModelGraph`] in float or shift-only arithmetic.

use std::fmt;
use std::str::FromStr;

use super::graph::{LayerKind, ModelGraph, Weights};
use super::kernels::{gemm_nt, Operand};
use super::ops;
use crate::error::{Error, Result};
use crate::lognum::{AccumMode, ArithFormat, QuantKind, QuantizerConfig};
use crate::tensor::{im2col_slice, quantize_tensor, transpose, ConvGeometry, QTensor, Tensor};

/// Arithmetic used for conv/fc dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Quantizer layers are bypassed; weights are used as stored
    /// (dequantized if coded).
    Float32,
    /// Real weights against log-coded activations.
    Method1,
    /// Weights and activations both log-coded, weights on the base-2 grid.
    Method2Base2,
    /// As [`Mode::Method2Base2`] with weights on the base-sqrt(2) grid.
    Method2Sqrt2,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Float32,
        Mode::Method1,
        Mode::Method2Base2,
        Mode::Method2Sqrt2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Float32 => "float32",
            Mode::Method1 => "method1",
            Mode::Method2Base2 => "method2_base2",
            Mode::Method2Sqrt2 => "method2_sqrt2",
        }
    }

    fn weight_base_frac_bits(&self) -> Option<u8> {
        match self {
            Mode::Method2Base2 => Some(0),
            Mode::Method2Sqrt2 => Some(1),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Mode::ALL.iter().map(Mode::as_str).collect();
                Error::config(format!("unknown mode `{s}`, expected one of {}", valid.join(", ")))
            })
    }
}

/// Inference settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub accum: AccumMode,
    pub fmt: ArithFormat,
}

impl ForwardOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            accum: AccumMode::Linear,
            fmt: ArithFormat::default(),
        }
    }

    pub fn with_accum(mut self, accum: AccumMode) -> Self {
        self.accum = accum;
        self
    }

    pub fn with_format(mut self, fmt: ArithFormat) -> Self {
        self.fmt = fmt;
        self
    }
}

/// Data flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Real(Tensor),
    Codes(QTensor),
}

impl Activation {
    pub fn shape(&self) -> &[usize] {
        match self {
            Activation::Real(t) => t.shape(),
            Activation::Codes(q) => q.shape(),
        }
    }

    pub fn to_real(&self) -> Tensor {
        match self {
            Activation::Real(t) => t.clone(),
            Activation::Codes(q) => q.dequantize(),
        }
    }

    pub fn into_real(self) -> Tensor {
        match self {
            Activation::Real(t) => t,
            Activation::Codes(q) => q.dequantize(),
        }
    }

    /// Kernel operand over `rows x k` with the payload already in row
    /// order. Linear codes are dequantized.
    fn operand_of(payload: ActPayload) -> Result<Operand> {
        Ok(match payload {
            ActPayload::Real(v) => Operand::Real(v),
            ActPayload::Codes(codes, cfg) if cfg.kind == QuantKind::Log => {
                Operand::codes(&codes, &cfg)?
            }
            ActPayload::Codes(codes, cfg) => Operand::Real(
                codes
                    .iter()
                    .map(|&c| crate::lognum::dequantize(c, &cfg))
                    .collect(),
            ),
        })
    }
}

enum ActPayload {
    Real(Vec<f64>),
    Codes(Vec<crate::lognum::LogCode>, QuantizerConfig),
}

/// Lowers an activation for convolution: returns the `(N*OH*OW) x (C*Kh*Kw)`
/// operand and `(OH, OW)`.
fn conv_input_operand(
    act: &Activation,
    geom: &ConvGeometry,
) -> Result<(Operand, usize, usize, usize, usize)> {
    let payload = match act {
        Activation::Real(t) => {
            let (m, rows, cols) = im2col_slice(t.data(), t.dims4()?, geom, 0.0)?;
            (ActPayload::Real(transpose(&m, rows, cols).into_iter().map(f64::from).collect()), rows, cols)
        }
        Activation::Codes(q) => {
            let zero = crate::lognum::LogCode::ZERO;
            let (m, rows, cols) = im2col_slice(q.codes(), q.dims4()?, geom, zero)?;
            (ActPayload::Codes(transpose(&m, rows, cols), *q.cfg()), rows, cols)
        }
    };
    let (p, k, np) = payload;
    let (_, _, h, w) = crate::tensor::dims4(act.shape())?;
    let (oh, ow) = geom.output_hw(h, w)?;
    Ok((Activation::operand_of(p)?, np, k, oh, ow))
}

/// Flattens an activation to an `N x features` operand.
fn fc_input_operand(act: &Activation) -> Result<(Operand, usize, usize)> {
    let shape = act.shape();
    let n = *shape.first().ok_or(Error::Empty("activation"))?;
    let k: usize = shape[1..].iter().product();
    let payload = match act {
        Activation::Real(t) => ActPayload::Real(t.data().iter().map(|&v| v as f64).collect()),
        Activation::Codes(q) => ActPayload::Codes(q.codes().to_vec(), *q.cfg()),
    };
    Ok((Activation::operand_of(payload)?, n, k))
}

/// `[OutC, N*OH*OW]` product to NCHW.
fn conv_output_to_nchw(m: &[f64], n: usize, oc: usize, oh: usize, ow: usize) -> Tensor {
    let p = oh * ow;
    let mut out = vec![0.0f32; n * oc * p];
    for c in 0..oc {
        for b in 0..n {
            let src = &m[c * n * p + b * p..c * n * p + (b + 1) * p];
            let dst = &mut out[(b * oc + c) * p..(b * oc + c + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s as f32;
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out).expect("shape computed from dims")
}

/// Weight operand for a mode: real in float/method-1, coded in method-2.
fn weight_operand(
    g: &ModelGraph,
    i: usize,
    mode: Mode,
) -> Result<Operand> {
    let w = g.weights(i)?;
    let real = || Operand::Real(w.to_real().data().iter().map(|&v| v as f64).collect());
    let Some(bfb) = mode.weight_base_frac_bits() else {
        return Ok(real());
    };
    let template = g.layers[i]
        .quant
        .or(match w {
            Weights::Quantized(q) => Some(*q.cfg()),
            Weights::Real(_) => None,
        })
        .ok_or_else(|| Error::MissingParam(format!("layer {i} weight quantizer for {mode}")))?;
    if template.kind == QuantKind::Linear {
        let q = quantize_tensor(&w.to_real(), &template)?;
        return Ok(Operand::Real(q.dequantize_f64()));
    }
    let cfg = template.with_base_frac_bits(bfb);
    match w {
        Weights::Quantized(q) if *q.cfg() == cfg => Operand::codes(q.codes(), &cfg),
        _ => {
            let q = quantize_tensor(&w.to_real(), &cfg)?;
            Operand::codes(q.codes(), &cfg)
        }
    }
}

/// Checks `input` against the graph's `(C, H, W)` and returns the batch size.
pub(crate) fn check_input(g: &ModelGraph, input: &Tensor) -> Result<usize> {
    let [c, h, w] = g.input_shape;
    let ok = match input.shape() {
        [_, ic, ih, iw] => [*ic, *ih, *iw] == [c, h, w],
        [_, f] => h == 1 && w == 1 && *f == c,
        _ => false,
    };
    if !ok {
        return Err(Error::shape(format!(
            "input {:?} does not match model input {:?}",
            input.shape(),
            g.input_shape
        )));
    }
    Ok(input.shape()[0])
}

/// Runs the layer pipeline and returns the final real-valued scores.
pub fn forward(g: &ModelGraph, input: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
    forward_observed(g, input, opts, |_, _| {})
}

/// [`forward`], handing each layer's input to `observe` with the layer index.
pub fn forward_observed(
    g: &ModelGraph,
    input: &Tensor,
    opts: &ForwardOptions,
    mut observe: impl FnMut(usize, &Activation),
) -> Result<Tensor> {
    g.validate()?;
    check_input(g, input)?;
    let quantize = opts.mode != Mode::Float32;
    let mut act = Activation::Real(input.clone());
    for (i, layer) in g.layers.iter().enumerate() {
        observe(i, &act);
        let ctx = |e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("layer {i}: {m}")),
            Error::Overflow(m) => Error::Overflow(format!("layer {i}: {m}")),
            e => e,
        };
        act = match layer.kind {
            LayerKind::Conv { out_channels, geom } => {
                let (x, np, k, oh, ow) = conv_input_operand(&act, &geom).map_err(ctx)?;
                let w = weight_operand(g, i, opts.mode)?;
                let m = gemm_nt(&w, &x, out_channels, np, k, &opts.fmt, opts.accum).map_err(ctx)?;
                let n = act.shape()[0];
                Activation::Real(conv_output_to_nchw(&m, n, out_channels, oh, ow))
            }
            LayerKind::Fc { out_features } => {
                let (x, n, k) = fc_input_operand(&act)?;
                let w = weight_operand(g, i, opts.mode)?;
                let m = gemm_nt(&x, &w, n, out_features, k, &opts.fmt, opts.accum).map_err(ctx)?;
                Activation::Real(Tensor::new(
                    vec![n, out_features],
                    m.into_iter().map(|v| v as f32).collect(),
                )?)
            }
            LayerKind::Relu => match &act {
                Activation::Real(t) => Activation::Real(ops::relu(t)),
                Activation::Codes(q) => Activation::Codes(ops::relu_codes(q)),
            },
            LayerKind::MaxPool(p) => match &act {
                Activation::Real(t) => Activation::Real(ops::maxpool(t, &p).map_err(ctx)?),
                Activation::Codes(q) => Activation::Codes(ops::maxpool_codes(q, &p).map_err(ctx)?),
            },
            LayerKind::BatchNorm => {
                Activation::Real(ops::batchnorm_forward(&act.to_real(), g.batchnorm(i)?)?)
            }
            LayerKind::Softmax => Activation::Real(ops::softmax(&act.to_real())?),
            LayerKind::LogQuant | LayerKind::LinearQuant => {
                if quantize {
                    let cfg = g.effective_quant(i).expect("validated quantizer layer");
                    Activation::Codes(quantize_tensor(&act.to_real(), &cfg)?)
                } else {
                    act
                }
            }
        };
    }
    let out = act.into_real();
    let n = out.shape()[0];
    let k = out.len() / n.max(1);
    out.reshape(vec![n, k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lognum::QuantizerConfig;
    use crate::nn::graph::{parse_arch, LayerSpec};

    #[test]
    fn mode_parse() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        let err = "method3".parse::<Mode>().unwrap_err().to_string();
        assert!(err.contains("method2_sqrt2"));
    }

    #[test]
    fn identity_conv_float_is_identity() {
        let mut g = ModelGraph::new(vec![LayerSpec::conv(2, 1, 1, 0)], [2, 3, 3], 0).unwrap();
        let w = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        g.set_weights(0, Weights::Real(w)).unwrap();
        let x = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|v| v as f32 * 0.5).collect()).unwrap();
        let y = forward(&g, &x, &ForwardOptions::new(Mode::Float32)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn single_fc_method2_unit_terms() {
        let layers = vec![
            LayerSpec::quantizer(QuantizerConfig::log(3, 0), 0),
            LayerSpec::fc(1).with_weight_quant(QuantizerConfig::log(4, 2).signed()),
        ];
        let mut g = ModelGraph::new(layers, [2, 1, 1], 2).unwrap();
        g.set_weights(1, Weights::Real(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()))
            .unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        for accum in [AccumMode::Linear, AccumMode::Log] {
            let opts = ForwardOptions::new(Mode::Method2Base2).with_accum(accum);
            assert_eq!(forward(&g, &x, &opts).unwrap().data(), &[2.0]);
        }
    }

    #[test]
    fn quantizers_bypassed_in_float_mode() {
        let g = ModelGraph::new(parse_arch("logquant:2").unwrap(), [3, 1, 1], 0).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.3, 0.7, 0.1]).unwrap();
        assert_eq!(forward(&g, &x, &ForwardOptions::new(Mode::Float32)).unwrap().data(), x.data());
        let q = forward(&g, &x, &ForwardOptions::new(Mode::Method1)).unwrap();
        assert_ne!(q.data(), x.data());
    }

    #[test]
    fn method2_requires_weight_quantizer() {
        let g = ModelGraph::new(parse_arch("fc:2").unwrap(), [3, 1, 1], 0).unwrap();
        let x = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            forward(&g, &x, &ForwardOptions::new(Mode::Method2Base2)),
            Err(Error::MissingParam(_))
        ));
        assert!(forward(&g, &x, &ForwardOptions::new(Mode::Method1)).is_ok());
    }

    #[test]
    fn input_shape_is_checked() {
        let g = ModelGraph::new(parse_arch("fc:2").unwrap(), [3, 1, 1], 0).unwrap();
        assert!(forward(&g, &Tensor::zeros(vec![1, 4]), &ForwardOptions::new(Mode::Float32)).is_err());
    }
}
