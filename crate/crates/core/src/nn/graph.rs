//! Layer descriptions, parameter storage and shape inference.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::ops::{BatchNormParams, PoolGeometry};
use crate::error::{Error, Result};
use crate::lognum::{QuantKind, QuantizerConfig};
use crate::tensor::{ConvGeometry, QTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        geom: ConvGeometry,
    },
    Fc {
        out_features: usize,
    },
    Relu,
    MaxPool(PoolGeometry),
    BatchNorm,
    LogQuant,
    LinearQuant,
    Softmax,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    pub fn is_quantizer(&self) -> bool {
        matches!(self, LayerKind::LogQuant | LayerKind::LinearQuant)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::BatchNorm => "bn",
            LayerKind::LogQuant => "logquant",
            LayerKind::LinearQuant => "linearquant",
            LayerKind::Softmax => "softmax",
        }
    }
}

/// One layer. Quantizer layers hold their quantizer in `quant`, with the
/// effective FSR set to the graph's global FSR plus `fsr_offset`. On
/// conv/fc layers `quant` is the optional weight quantizer with an absolute
/// FSR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub quant: Option<QuantizerConfig>,
    pub fsr_offset: i32,
}

impl LayerSpec {
    fn plain(kind: LayerKind) -> Self {
        Self {
            kind,
            quant: None,
            fsr_offset: 0,
        }
    }

    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::plain(LayerKind::Conv {
            out_channels,
            geom: ConvGeometry::square(kernel, stride, pad),
        })
    }

    pub fn fc(out_features: usize) -> Self {
        Self::plain(LayerKind::Fc { out_features })
    }

    pub fn relu() -> Self {
        Self::plain(LayerKind::Relu)
    }

    pub fn maxpool(kernel: usize, stride: usize) -> Self {
        Self::plain(LayerKind::MaxPool(PoolGeometry::new(kernel, stride)))
    }

    pub fn batchnorm() -> Self {
        Self::plain(LayerKind::BatchNorm)
    }

    pub fn softmax() -> Self {
        Self::plain(LayerKind::Softmax)
    }

    /// Activation quantizer; its FSR field is replaced at run time.
    pub fn quantizer(cfg: QuantizerConfig, fsr_offset: i32) -> Self {
        let kind = match cfg.kind {
            QuantKind::Log => LayerKind::LogQuant,
            QuantKind::Linear => LayerKind::LinearQuant,
        };
        Self {
            kind,
            quant: Some(cfg.with_fsr(0)),
            fsr_offset,
        }
    }

    pub fn with_weight_quant(mut self, cfg: QuantizerConfig) -> Self {
        self.quant = Some(cfg);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.quant) {
            (LayerKind::LogQuant | LayerKind::LinearQuant, None) => {
                return Err(Error::config(format!("{} layer without a quantizer", self.kind.name())))
            }
            (LayerKind::LogQuant, Some(q)) if q.kind != QuantKind::Log => {
                return Err(Error::config("logquant layer with a linear quantizer"))
            }
            (LayerKind::LinearQuant, Some(q)) if q.kind != QuantKind::Linear => {
                return Err(Error::config("linearquant layer with a log quantizer"))
            }
            (LayerKind::Conv { .. } | LayerKind::Fc { .. }, Some(q)) if !q.signed => {
                return Err(Error::config("weight quantizers must be signed"))
            }
            (k, Some(_)) if !k.has_weights() && !k.is_quantizer() => {
                return Err(Error::config(format!("{} layer cannot carry a quantizer", k.name())))
            }
            _ => {}
        }
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        Ok(())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv { out_channels, geom } => write!(
                f,
                "conv:{out_channels}:{}:{}:{}",
                geom.kernel_h, geom.stride, geom.pad
            ),
            LayerKind::Fc { out_features } => write!(f, "fc:{out_features}"),
            LayerKind::MaxPool(p) => write!(f, "maxpool:{}:{}", p.kernel, p.stride),
            LayerKind::LogQuant | LayerKind::LinearQuant => {
                let bits = self.quant.map_or(0, |q| q.bitwidth);
                write!(f, "{}:{bits}", self.kind.name())?;
                if self.fsr_offset != 0 {
                    write!(f, ":{}", self.fsr_offset)?;
                }
                Ok(())
            }
            k => f.write_str(k.name()),
        }
    }
}

/// Parses a comma-separated architecture such as
/// `conv:8:3:1:1,bn,relu,logquant:4,maxpool:2:2,fc:4`.
///
/// Quantizer tokens are `logquant:BITS[:OFFSET]` and
/// `linearquant:BITS[:OFFSET]`, unsigned, rounding to nearest.
pub fn parse_arch(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let parts: Vec<&str> = token.split(':').collect();
        let bad = || Error::config(format!("bad layer token `{token}`"));
        let num = |i: usize| -> Result<usize> {
            parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad())
        };
        let arity = |n: usize| if parts.len() == n { Ok(()) } else { Err(bad()) };
        let layer = match parts[0] {
            "conv" => {
                arity(5)?;
                LayerSpec::conv(num(1)?, num(2)?, num(3)?, num(4)?)
            }
            "fc" => {
                arity(2)?;
                LayerSpec::fc(num(1)?)
            }
            "relu" => {
                arity(1)?;
                LayerSpec::relu()
            }
            "bn" => {
                arity(1)?;
                LayerSpec::batchnorm()
            }
            "softmax" => {
                arity(1)?;
                LayerSpec::softmax()
            }
            "maxpool" => {
                arity(3)?;
                LayerSpec::maxpool(num(1)?, num(2)?)
            }
            "logquant" | "linearquant" => {
                if !(2..=3).contains(&parts.len()) {
                    return Err(bad());
                }
                let bits = u8::try_from(num(1)?).map_err(|_| bad())?;
                let offset = match parts.get(2) {
                    Some(o) => o.parse().map_err(|_| bad())?,
                    None => 0,
                };
                let cfg = if parts[0] == "logquant" {
                    QuantizerConfig::log(bits, 0)
                } else {
                    QuantizerConfig::linear(bits, 0)
                };
                LayerSpec::quantizer(cfg, offset)
            }
            _ => return Err(bad()),
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// Conv/fc weights, real or coded.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Real(Tensor),
    Quantized(QTensor),
}

impl Weights {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weights::Real(t) => t.shape(),
            Weights::Quantized(q) => q.shape(),
        }
    }

    pub fn to_real(&self) -> Tensor {
        match self {
            Weights::Real(t) => t.clone(),
            Weights::Quantized(q) => q.dequantize(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Weights(Weights),
    BatchNorm(BatchNormParams),
}

/// Ordered layers with a global FSR and per-layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub global_fsr: i32,
    /// `(C, H, W)` of one input sample.
    pub input_shape: [usize; 3],
    pub params: Vec<LayerParams>,
}

impl ModelGraph {
    /// Graph with zero weights and identity normalization.
    pub fn new(layers: Vec<LayerSpec>, input_shape: [usize; 3], global_fsr: i32) -> Result<Self> {
        let mut g = Self {
            params: vec![LayerParams::None; layers.len()],
            layers,
            global_fsr,
            input_shape,
        };
        let shapes = g.infer_shapes()?;
        for (i, layer) in g.layers.iter().enumerate() {
            g.params[i] = match layer.kind {
                LayerKind::Conv { .. } | LayerKind::Fc { .. } => LayerParams::Weights(
                    Weights::Real(Tensor::zeros(g.weight_shape(i, &shapes)?)),
                ),
                LayerKind::BatchNorm => LayerParams::BatchNorm(BatchNormParams::identity(shapes[i][0])),
                _ => LayerParams::None,
            };
        }
        Ok(g)
    }

    /// Uniform `+-sqrt(6 / fan_in)` weights.
    pub fn init_he_uniform<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        for i in 0..self.layers.len() {
            if let LayerParams::Weights(w) = &self.params[i] {
                let shape = w.shape().to_vec();
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::config(e.to_string()))?;
                let n = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(rng)).collect();
                self.params[i] = LayerParams::Weights(Weights::Real(Tensor::new(shape, data)?));
            }
        }
        Ok(())
    }

    /// Per-sample input shape of each layer (`shapes[i]`) plus the final
    /// output shape (`shapes[len]`).
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [c, h, w] = self.input_shape;
        let mut cur = if h == 1 && w == 1 { vec![c] } else { vec![c, h, w] };
        let mut shapes = vec![cur.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            let ctx = |e: Error| Error::shape(format!("layer {i} ({}): {e}", layer.kind.name()));
            cur = match layer.kind {
                LayerKind::Conv { out_channels, geom } => {
                    let [_, h, w] = spatial(&cur).map_err(ctx)?;
                    let (oh, ow) = geom.output_hw(h, w).map_err(ctx)?;
                    vec![out_channels, oh, ow]
                }
                LayerKind::Fc { out_features } => vec![out_features],
                LayerKind::MaxPool(p) => {
                    let [c, h, w] = spatial(&cur).map_err(ctx)?;
                    let (oh, ow) = p.output_hw(h, w).map_err(ctx)?;
                    vec![c, oh, ow]
                }
                LayerKind::Softmax if cur.len() != 1 => {
                    return Err(ctx(Error::shape("softmax needs flat scores")))
                }
                _ => cur,
            };
            if cur.iter().any(|&d| d == 0) {
                return Err(ctx(Error::shape("empty output")));
            }
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    fn weight_shape(&self, i: usize, shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let input = &shapes[i];
        Ok(match self.layers[i].kind {
            LayerKind::Conv { out_channels, geom } => {
                vec![out_channels, input[0], geom.kernel_h, geom.kernel_w]
            }
            LayerKind::Fc { out_features } => vec![out_features, input.iter().product()],
            _ => return Err(Error::shape(format!("layer {i} has no weights"))),
        })
    }

    /// Checks shapes and that every parameter matches its layer.
    pub fn validate(&self) -> Result<()> {
        if self.params.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                left: self.layers.len(),
                right: self.params.len(),
            });
        }
        let shapes = self.infer_shapes()?;
        for (i, layer) in self.layers.iter().enumerate() {
            match (&layer.kind, &self.params[i]) {
                (LayerKind::Conv { .. } | LayerKind::Fc { .. }, LayerParams::Weights(w)) => {
                    let expect = self.weight_shape(i, &shapes)?;
                    if w.shape() != expect.as_slice() {
                        return Err(Error::shape(format!(
                            "layer {i} weights {:?}, expected {expect:?}",
                            w.shape()
                        )));
                    }
                }
                (LayerKind::Conv { .. } | LayerKind::Fc { .. }, _) => {
                    return Err(Error::MissingWeights(i))
                }
                (LayerKind::BatchNorm, LayerParams::BatchNorm(p)) => p.validate(shapes[i][0])?,
                (LayerKind::BatchNorm, _) => {
                    return Err(Error::MissingParam(format!("layer {i} batchnorm statistics")))
                }
                (_, LayerParams::None) => {}
                (_, _) => {
                    return Err(Error::shape(format!("layer {i} carries unexpected parameters")))
                }
            }
        }
        Ok(())
    }

    /// Quantizer of layer `i` with its effective FSR.
    pub fn effective_quant(&self, i: usize) -> Option<QuantizerConfig> {
        let layer = &self.layers[i];
        let q = layer.quant?;
        Some(if layer.kind.is_quantizer() {
            q.with_fsr(self.global_fsr + layer.fsr_offset)
        } else {
            q
        })
    }

    pub fn weights(&self, i: usize) -> Result<&Weights> {
        match self.params.get(i) {
            Some(LayerParams::Weights(w)) => Ok(w),
            _ => Err(Error::MissingWeights(i)),
        }
    }

    pub fn set_weights(&mut self, i: usize, w: Weights) -> Result<()> {
        let shapes = self.infer_shapes()?;
        let expect = self.weight_shape(i, &shapes)?;
        if w.shape() != expect.as_slice() {
            return Err(Error::shape(format!(
                "layer {i} weights {:?}, expected {expect:?}",
                w.shape()
            )));
        }
        self.params[i] = LayerParams::Weights(w);
        Ok(())
    }

    pub fn batchnorm(&self, i: usize) -> Result<&BatchNormParams> {
        match self.params.get(i) {
            Some(LayerParams::BatchNorm(p)) => Ok(p),
            _ => Err(Error::MissingParam(format!("layer {i} batchnorm statistics"))),
        }
    }

    /// Number of classes produced by the last layer.
    pub fn output_len(&self) -> Result<usize> {
        Ok(self.infer_shapes()?.last().map_or(0, |s| s.iter().product()))
    }

    /// Architecture in the [`parse_arch`] syntax.
    pub fn arch_string(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn spatial(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::shape(format!("expected a (C, H, W) input, got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn arch_round_trip() {
        let s = "conv:8:3:1:1,bn,relu,logquant:4,maxpool:2:2,fc:10,linearquant:3:-2,softmax";
        let layers = parse_arch(s).unwrap();
        assert_eq!(layers.len(), 8);
        let g = ModelGraph::new(layers, [1, 12, 12], 3).unwrap();
        assert_eq!(g.arch_string(), s);
        assert_eq!(g.output_len().unwrap(), 10);
        assert_eq!(g.effective_quant(6).unwrap().fsr, 1);
    }

    #[test]
    fn arch_errors() {
        for bad in ["conv:8:3", "fc", "pool:2:2", "logquant", "logquant:x", "relu:1", "logquant:12"] {
            assert!(parse_arch(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn shape_inference() {
        let g = ModelGraph::new(parse_arch("conv:4:3:1:0,maxpool:2:2,fc:3").unwrap(), [2, 6, 6], 0)
            .unwrap();
        let s = g.infer_shapes().unwrap();
        assert_eq!(s, vec![vec![2, 6, 6], vec![4, 4, 4], vec![4, 2, 2], vec![3]]);
        assert_eq!(g.weights(0).unwrap().shape(), &[4, 2, 3, 3]);
        assert_eq!(g.weights(2).unwrap().shape(), &[3, 16]);
        assert!(ModelGraph::new(parse_arch("fc:3,conv:2:3:1:0").unwrap(), [1, 4, 4], 0).is_err());
        assert!(ModelGraph::new(parse_arch("conv:2:5:1:0").unwrap(), [1, 4, 4], 0).is_err());
    }

    #[test]
    fn validate_detects_bad_weights() {
        let mut g = ModelGraph::new(parse_arch("fc:3").unwrap(), [4, 1, 1], 0).unwrap();
        assert!(g.validate().is_ok());
        assert!(g.set_weights(0, Weights::Real(Tensor::zeros(vec![3, 5]))).is_err());
        g.params[0] = LayerParams::None;
        assert!(matches!(g.validate(), Err(Error::MissingWeights(0))));
    }

    #[test]
    fn he_init_is_seeded_and_bounded() {
        let layers = parse_arch("conv:4:3:1:1,fc:2").unwrap();
        let mut a = ModelGraph::new(layers.clone(), [1, 4, 4], 0).unwrap();
        let mut b = ModelGraph::new(layers, [1, 4, 4], 0).unwrap();
        a.init_he_uniform(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.init_he_uniform(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let w = a.weights(0).unwrap().to_real();
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|&v| v != 0.0));
    }
}
