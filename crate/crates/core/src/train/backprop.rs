//! Training-mode forward pass with caches, and the matching backward pass.
//!
//! Activations, gradients and weights are held in `f64` or as codes. Every
//! conv/fc product, forward and backward, goes through the shared kernels,
//! so coded operands use the shift-only datapath.

use crate::error::{Error, Result};
use crate::lognum::{dequantize, quantize_unchecked, LogCode, QuantKind, QuantizerConfig};
use crate::nn::kernels::{gemm_nt, Operand};
use crate::nn::{code_key, pool_argmax, LayerKind, ModelGraph};
use crate::tensor::{col2im_add, dims4, im2col_slice, transpose, ConvGeometry};

use super::config::TrainConfig;

/// Real or coded payload of a matrix or activation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Payload {
    Real(Vec<f64>),
    Codes(Vec<LogCode>, QuantizerConfig),
}

impl Payload {
    pub fn quantize(data: &[f64], cfg: &QuantizerConfig) -> Result<Payload> {
        cfg.validate()?;
        let mut codes = Vec::with_capacity(data.len());
        for &v in data {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("value {v} reached a quantizer")));
            }
            if v < 0.0 && !cfg.signed {
                return Err(Error::NegativeUnsigned(v));
            }
            codes.push(quantize_unchecked(v, cfg));
        }
        Ok(Payload::Codes(codes, *cfg))
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::Real(v) => v.len(),
            Payload::Codes(c, _) => c.len(),
        }
    }

    pub fn to_real(&self) -> Vec<f64> {
        match self {
            Payload::Real(v) => v.clone(),
            Payload::Codes(c, cfg) => c.iter().map(|&c| dequantize(c, cfg)).collect(),
        }
    }

    /// Log codes stay coded; linear codes are dequantized.
    pub fn operand(&self) -> Result<Operand> {
        match self {
            Payload::Codes(c, cfg) if cfg.kind == QuantKind::Log => Operand::codes(c, cfg),
            p => Ok(Operand::Real(p.to_real())),
        }
    }

    pub fn transposed(&self, rows: usize, cols: usize) -> Payload {
        match self {
            Payload::Real(v) => Payload::Real(transpose(v, rows, cols)),
            Payload::Codes(c, cfg) => Payload::Codes(transpose(c, rows, cols), *cfg),
        }
    }

    fn nchw_to_cnp(&self, n: usize, c: usize, p: usize) -> Payload {
        match self {
            Payload::Real(v) => Payload::Real(nchw_to_cnp(v, n, c, p)),
            Payload::Codes(v, cfg) => Payload::Codes(nchw_to_cnp(v, n, c, p), *cfg),
        }
    }

    fn im2col(&self, dims: (usize, usize, usize, usize), geom: &ConvGeometry) -> Result<Payload> {
        Ok(match self {
            Payload::Real(v) => Payload::Real(im2col_slice(v, dims, geom, 0.0)?.0),
            Payload::Codes(v, cfg) => Payload::Codes(im2col_slice(v, dims, geom, LogCode::ZERO)?.0, *cfg),
        })
    }
}

fn nchw_to_cnp<T: Copy>(data: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for ch in 0..c {
        for b in 0..n {
            out.extend_from_slice(&data[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

fn cnp_to_nchw<T: Copy + Default>(data: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&data[(ch * n + b) * p..(ch * n + b + 1) * p]);
        }
    }
    out
}

/// Activation with its batch-leading shape.
#[derive(Debug, Clone)]
pub(crate) struct Act {
    pub shape: Vec<usize>,
    pub data: Payload,
}

/// Trainable parameters of one layer, in full precision.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ParamSet {
    None,
    Weights(Vec<f64>),
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    },
}

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Weights(Vec<f64>),
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
}

impl LayerGrad {
    pub(crate) fn check_finite(&self, layer: usize) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            LayerGrad::None => true,
            LayerGrad::Weights(g) => finite(g),
            LayerGrad::BatchNorm { gamma, beta } => finite(gamma) && finite(beta),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("gradient of layer {layer}")))
        }
    }
}

pub(crate) enum Cache {
    None,
    Conv {
        cols: Payload,
        w: Payload,
        in_dims: (usize, usize, usize, usize),
        geom: ConvGeometry,
        out_channels: usize,
        out_p: usize,
    },
    Fc {
        x: Payload,
        w: Payload,
        n: usize,
        k: usize,
        out: usize,
    },
    Relu(Vec<bool>),
    Pool {
        idx: Vec<usize>,
        in_len: usize,
    },
    BatchNorm {
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize, usize),
    },
}

/// Fixed per-step context.
pub(crate) struct Pass<'a> {
    pub graph: &'a ModelGraph,
    pub params: &'a [ParamSet],
    /// Effective weight quantizer per layer.
    pub weight_q: &'a [Option<QuantizerConfig>],
    pub cfg: &'a TrainConfig,
    /// Batch statistics for normalization (training) or running ones.
    pub training: bool,
}

/// Output of [`Pass::forward`].
pub(crate) struct ForwardOut {
    pub scores: Vec<f64>,
    pub classes: usize,
    pub caches: Vec<Cache>,
    /// Per normalization layer: batch mean and unbiased variance.
    pub batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Pass<'_> {
    /// Layers before a trailing softmax; the loss applies softmax itself.
    fn body_len(&self) -> usize {
        match self.graph.layers.last() {
            Some(l) if l.kind == LayerKind::Softmax => self.graph.layers.len() - 1,
            _ => self.graph.layers.len(),
        }
    }

    fn weight_payload(&self, i: usize) -> Result<Payload> {
        let ParamSet::Weights(w) = &self.params[i] else {
            return Err(Error::MissingWeights(i));
        };
        match &self.weight_q[i] {
            Some(q) => Payload::quantize(w, q),
            None => Ok(Payload::Real(w.clone())),
        }
    }

    pub fn forward(&self, input: Act) -> Result<ForwardOut> {
        let layers = &self.graph.layers[..self.body_len()];
        let mut act = input;
        let mut caches = Vec::with_capacity(layers.len());
        let mut batch_stats = vec![None; layers.len()];
        for (i, layer) in layers.iter().enumerate() {
            let n = act.shape[0];
            let (next, cache) = match layer.kind {
                LayerKind::Conv { out_channels, geom } => {
                    let dims = dims4(&act.shape)?;
                    let (oh, ow) = geom.output_hw(dims.2, dims.3)?;
                    let cols = act.data.im2col(dims, &geom)?;
                    let k = dims.1 * geom.kernel_h * geom.kernel_w;
                    let np = n * oh * ow;
                    let w = self.weight_payload(i)?;
                    let m = gemm_nt(
                        &w.operand()?,
                        &cols.transposed(k, np).operand()?,
                        out_channels,
                        np,
                        k,
                        &self.cfg.fmt,
                        self.cfg.accum,
                    )?;
                    let out = cnp_to_nchw(&m, n, out_channels, oh * ow);
                    (
                        Act {
                            shape: vec![n, out_channels, oh, ow],
                            data: Payload::Real(out),
                        },
                        Cache::Conv {
                            cols,
                            w,
                            in_dims: dims,
                            geom,
                            out_channels,
                            out_p: oh * ow,
                        },
                    )
                }
                LayerKind::Fc { out_features } => {
                    let k = act.data.len() / n;
                    let w = self.weight_payload(i)?;
                    let m = gemm_nt(
                        &act.data.operand()?,
                        &w.operand()?,
                        n,
                        out_features,
                        k,
                        &self.cfg.fmt,
                        self.cfg.accum,
                    )?;
                    (
                        Act {
                            shape: vec![n, out_features],
                            data: Payload::Real(m),
                        },
                        Cache::Fc {
                            x: act.data,
                            w,
                            n,
                            k,
                            out: out_features,
                        },
                    )
                }
                LayerKind::Relu => {
                    let (data, mask) = match act.data {
                        Payload::Real(v) => {
                            let mask: Vec<bool> = v.iter().map(|&x| x > 0.0).collect();
                            (Payload::Real(v.into_iter().map(|x| x.max(0.0)).collect()), mask)
                        }
                        Payload::Codes(c, cfg) => {
                            let mask: Vec<bool> = c.iter().map(|c| !c.is_zero() && !c.is_negative()).collect();
                            let c = c
                                .into_iter()
                                .zip(&mask)
                                .map(|(c, &m)| if m { c } else { LogCode::ZERO })
                                .collect();
                            (Payload::Codes(c, cfg), mask)
                        }
                    };
                    (Act { shape: act.shape, data }, Cache::Relu(mask))
                }
                LayerKind::MaxPool(p) => {
                    let dims = dims4(&act.shape)?;
                    let (idx, oh, ow) = match &act.data {
                        Payload::Real(v) => pool_argmax(v, dims, &p, |a, b| a > b)?,
                        Payload::Codes(c, _) => {
                            pool_argmax(c, dims, &p, |a, b| code_key(*a) > code_key(*b))?
                        }
                    };
                    let data = match &act.data {
                        Payload::Real(v) => Payload::Real(idx.iter().map(|&j| v[j]).collect()),
                        Payload::Codes(c, cfg) => {
                            Payload::Codes(idx.iter().map(|&j| c[j]).collect(), *cfg)
                        }
                    };
                    let in_len = act.data.len();
                    (
                        Act {
                            shape: vec![dims.0, dims.1, oh, ow],
                            data,
                        },
                        Cache::Pool { idx, in_len },
                    )
                }
                LayerKind::BatchNorm => {
                    let ParamSet::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        eps,
                    } = &self.params[i]
                    else {
                        return Err(Error::MissingParam(format!("layer {i} batchnorm statistics")));
                    };
                    let dims = dims4(&act.shape)?;
                    let x = act.data.to_real();
                    let (mean, var) = if self.training {
                        let (mean, var) = channel_stats(&x, dims);
                        let count = (dims.0 * dims.2 * dims.3) as f64;
                        let unbiased = if count > 1.0 {
                            var.iter().map(|v| v * count / (count - 1.0)).collect()
                        } else {
                            var.clone()
                        };
                        batch_stats[i] = Some((mean.clone(), unbiased));
                        (mean, var)
                    } else {
                        (running_mean.clone(), running_var.clone())
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let (n, c, h, w) = dims;
                    let hw = h * w;
                    let mut x_hat = x;
                    let mut out = vec![0.0; x_hat.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                x_hat[j] = (x_hat[j] - mean[ch]) * inv_std[ch];
                                out[j] = gamma[ch] * x_hat[j] + beta[ch];
                            }
                        }
                    }
                    (
                        Act {
                            shape: act.shape,
                            data: Payload::Real(out),
                        },
                        Cache::BatchNorm { x_hat, inv_std, dims },
                    )
                }
                LayerKind::LogQuant | LayerKind::LinearQuant => {
                    let data = if self.cfg.activation_q.is_some() {
                        let q = self.graph.effective_quant(i).expect("quantizer layer");
                        Payload::quantize(&act.data.to_real(), &q)?
                    } else {
                        act.data
                    };
                    (Act { shape: act.shape, data }, Cache::None)
                }
                LayerKind::Softmax => {
                    return Err(Error::config("softmax is only supported as the final layer"))
                }
            };
            act = next;
            caches.push(cache);
        }
        let n = act.shape[0];
        let scores = act.data.to_real();
        Ok(ForwardOut {
            classes: scores.len() / n.max(1),
            scores,
            caches,
            batch_stats,
        })
    }

    /// Back-propagates `grad` (loss gradient w.r.t. the scores).
    pub fn backward(&self, caches: &[Cache], grad: Vec<f64>) -> Result<Vec<LayerGrad>> {
        let first_param = self
            .params
            .iter()
            .position(|p| *p != ParamSet::None)
            .unwrap_or(usize::MAX);
        let mut grads = vec![LayerGrad::None; self.graph.layers.len()];
        let mut g = grad;
        for i in (0..caches.len()).rev() {
            let need_input = i > first_param;
            match &caches[i] {
                Cache::None => {}
                Cache::Relu(mask) => {
                    for (v, &m) in g.iter_mut().zip(mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                Cache::Pool { idx, in_len } => {
                    let mut gi = vec![0.0; *in_len];
                    for (&j, &v) in idx.iter().zip(&g) {
                        gi[j] += v;
                    }
                    g = gi;
                }
                Cache::BatchNorm { x_hat, inv_std, dims } => {
                    let ParamSet::BatchNorm { gamma, .. } = &self.params[i] else {
                        unreachable!("normalization cache without parameters");
                    };
                    let (n, c, h, w) = *dims;
                    let hw = h * w;
                    let count = (n * hw) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                dbeta[ch] += g[j];
                                dgamma[ch] += g[j] * x_hat[j];
                            }
                        }
                    }
                    if need_input {
                        for b in 0..n {
                            for ch in 0..c {
                                let scale = gamma[ch] * inv_std[ch] / count;
                                for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                    g[j] = scale * (count * g[j] - dbeta[ch] - x_hat[j] * dgamma[ch]);
                                }
                            }
                        }
                    }
                    grads[i] = LayerGrad::BatchNorm {
                        gamma: dgamma,
                        beta: dbeta,
                    };
                }
                Cache::Conv {
                    cols,
                    w,
                    in_dims,
                    geom,
                    out_channels,
                    out_p,
                } => {
                    let (n, c, _, _) = *in_dims;
                    let oc = *out_channels;
                    let np = n * out_p;
                    let k = c * geom.kernel_h * geom.kernel_w;
                    let gq = self.quantize_gradient(&g)?.nchw_to_cnp(n, oc, *out_p);
                    let gw = gemm_nt(
                        &gq.operand()?,
                        &cols.operand()?,
                        oc,
                        k,
                        np,
                        &self.cfg.fmt,
                        self.cfg.accum,
                    )?;
                    if need_input {
                        let gcols = gemm_nt(
                            &w.transposed(oc, k).operand()?,
                            &gq.transposed(oc, np).operand()?,
                            k,
                            np,
                            oc,
                            &self.cfg.fmt,
                            self.cfg.accum,
                        )?;
                        g = col2im_add(&gcols, *in_dims, geom)?;
                    }
                    grads[i] = LayerGrad::Weights(gw);
                }
                Cache::Fc { x, w, n, k, out } => {
                    let gq = self.quantize_gradient(&g)?;
                    let gw = gemm_nt(
                        &gq.transposed(*n, *out).operand()?,
                        &x.transposed(*n, *k).operand()?,
                        *out,
                        *k,
                        *n,
                        &self.cfg.fmt,
                        self.cfg.accum,
                    )?;
                    if need_input {
                        g = gemm_nt(
                            &gq.operand()?,
                            &w.transposed(*out, *k).operand()?,
                            *n,
                            *k,
                            *out,
                            &self.cfg.fmt,
                            self.cfg.accum,
                        )?;
                    }
                    grads[i] = LayerGrad::Weights(gw);
                }
            }
            if !need_input {
                break;
            }
        }
        Ok(grads)
    }

    fn quantize_gradient(&self, g: &[f64]) -> Result<Payload> {
        match &self.cfg.gradient_q {
            Some(q) => {
                let fsr = super::dynamic_gradient_fsr(g, self.cfg.fsr_floor);
                Payload::quantize(g, &q.with_fsr(fsr))
            }
            None => Ok(Payload::Real(g.to_vec())),
        }
    }
}

/// Per-channel mean and biased variance.
fn channel_stats(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            mean[ch] += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            var[ch] += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Mean softmax cross-entropy, its gradient w.r.t. the scores, and the
/// number of rows whose argmax equals the label.
pub(crate) fn cross_entropy(scores: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>, usize)> {
    let n = labels.len();
    if n == 0 || scores.len() != n * classes {
        return Err(Error::shape(format!(
            "{} scores for {n} labels of {classes} classes",
            scores.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Domain(format!("label {label} out of {classes} classes")));
        }
        let row = &scores[b * classes..(b + 1) * classes];
        let (mut best, mut m) = (0, f64::NEG_INFINITY);
        for (j, &v) in row.iter().enumerate() {
            if v > m {
                m = v;
                best = j;
            }
        }
        correct += (best == label) as usize;
        let log_sum = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        loss += log_sum - row[label];
        for j in 0..classes {
            grad[b * classes + j] = ((row[j] - log_sum).exp() - (j == label) as u8 as f64) / n as f64;
        }
    }
    Ok((loss / n as f64, grad, correct))
}
