//! Quantized training: quantized forward, quantized gradients through the
//! shift-only kernels, and full-precision weight updates.
//!
//! Per step, weights are quantized with the layer's current weight FSR, the
//! network runs forward with activation quantizers applied, and the loss
//! gradient is propagated back. At every conv/fc output the incoming
//! gradient is quantized once (FSR from [`dynamic_gradient_fsr`]) and reused
//! for both the input-gradient and the weight-gradient product. Quantizers
//! have no modeled derivative.

mod backprop;
mod config;
mod optim;

pub use backprop::LayerGrad;
pub use config::{LrSchedule, Optimizer, TrainConfig};
pub use optim::{optimizer_step, Moments};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lognum::{QuantizerConfig, MAX_ABS_FSR};
use crate::nn::{check_input, BatchNormParams, LayerKind, LayerParams, LayerSpec, ModelGraph, Weights};
use crate::tensor::Tensor;
use backprop::{cross_entropy, Act, ParamSet, Pass, Payload};

/// Smallest FSR at which no element of `g` clips high:
/// `ceil(log2(max |g|))`, or `floor` for an all-zero tensor.
pub fn dynamic_gradient_fsr(g: &[f64], floor: i32) -> i32 {
    let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return floor;
    }
    let bits = max.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let exact_power = bits & ((1u64 << 52) - 1) == 0 && biased != 0;
    let ceil = if biased == 0 {
        max.log2().ceil() as i32
    } else {
        biased - 1023 + (!exact_power) as i32
    };
    ceil.clamp(-MAX_ABS_FSR, MAX_ABS_FSR)
}

/// Loss and accuracy over one batch or dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Metrics after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Full-precision parameters, optimizer state and RNG of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    graph: ModelGraph,
    params: Vec<ParamSet>,
    moments: Vec<Vec<Moments>>,
    weight_q: Vec<Option<QuantizerConfig>>,
    epoch: usize,
    step: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state with He-uniform weights drawn from the config seed.
    pub fn new(mut graph: ModelGraph, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        graph.init_he_uniform(&mut rng)?;
        Self::with_rng(graph, cfg, rng)
    }

    /// State starting from the graph's current parameters.
    pub fn from_graph(graph: ModelGraph, cfg: &TrainConfig) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::with_rng(graph, cfg, rng)
    }

    fn with_rng(mut graph: ModelGraph, cfg: &TrainConfig, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        graph.validate()?;
        let last = graph.layers.len().saturating_sub(1);
        if let Some(i) = graph
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::Softmax)
            .filter(|&i| i != last)
        {
            return Err(Error::config(format!("softmax at layer {i} must be the final layer")));
        }
        if let Some(aq) = cfg.activation_q {
            graph.global_fsr = aq.fsr;
            for layer in graph.layers.iter_mut().filter(|l| l.kind.is_quantizer()) {
                *layer = LayerSpec::quantizer(aq, layer.fsr_offset);
            }
        }
        let mut params = Vec::with_capacity(graph.layers.len());
        let mut moments = Vec::with_capacity(graph.layers.len());
        for p in &graph.params {
            let (set, m) = match p {
                LayerParams::Weights(w) => {
                    let w: Vec<f64> = w.to_real().data().iter().map(|&v| v as f64).collect();
                    let m = vec![Moments::zeros(w.len())];
                    (ParamSet::Weights(w), m)
                }
                LayerParams::BatchNorm(b) => {
                    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
                    let c = b.channels();
                    (
                        ParamSet::BatchNorm {
                            gamma: f(&b.gamma),
                            beta: f(&b.beta),
                            running_mean: f(&b.running_mean),
                            running_var: f(&b.running_var),
                            eps: b.eps as f64,
                        },
                        vec![Moments::zeros(c), Moments::zeros(c)],
                    )
                }
                LayerParams::None => (ParamSet::None, Vec::new()),
            };
            params.push(set);
            moments.push(m);
        }
        let mut state = Self {
            weight_q: vec![None; graph.layers.len()],
            graph,
            params,
            moments,
            epoch: 0,
            step: 0,
            rng,
        };
        state.recalibrate_weight_fsr(cfg);
        Ok(state)
    }

    /// Sets each weight quantizer's FSR from the current `max |W|` of its
    /// layer.
    pub fn recalibrate_weight_fsr(&mut self, cfg: &TrainConfig) {
        for (i, p) in self.params.iter().enumerate() {
            self.weight_q[i] = match (p, cfg.weight_q) {
                (ParamSet::Weights(w), Some(q)) => {
                    Some(q.with_fsr(dynamic_gradient_fsr(w, cfg.fsr_floor)))
                }
                _ => None,
            };
        }
    }

    /// Current weight quantizer of layer `i`.
    pub fn weight_quantizer(&self, i: usize) -> Option<QuantizerConfig> {
        self.weight_q.get(i).copied().flatten()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Layer structure with quantizers as configured for training.
    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn weights(&self, i: usize) -> Option<&[f64]> {
        match self.params.get(i) {
            Some(ParamSet::Weights(w)) => Some(w),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self, i: usize) -> Option<&mut [f64]> {
        match self.params.get_mut(i) {
            Some(ParamSet::Weights(w)) => Some(w),
            _ => None,
        }
    }

    /// `(gamma, beta)` of a normalization layer.
    pub fn batchnorm_mut(&mut self, i: usize) -> Option<(&mut [f64], &mut [f64])> {
        match self.params.get_mut(i) {
            Some(ParamSet::BatchNorm { gamma, beta, .. }) => Some((gamma, beta)),
            _ => None,
        }
    }

    /// The model as a self-contained graph: current weights in `f32`,
    /// running statistics, and weight quantizers at their current FSRs.
    pub fn export(&self) -> Result<ModelGraph> {
        let mut g = self.graph.clone();
        let shapes: Vec<Vec<usize>> = g
            .params
            .iter()
            .map(|p| match p {
                LayerParams::Weights(w) => w.shape().to_vec(),
                _ => Vec::new(),
            })
            .collect();
        for (i, p) in self.params.iter().enumerate() {
            let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
            g.params[i] = match p {
                ParamSet::None => LayerParams::None,
                ParamSet::Weights(w) => {
                    if let Some(q) = self.weight_q[i] {
                        g.layers[i].quant = Some(q);
                    }
                    LayerParams::Weights(Weights::Real(Tensor::new(shapes[i].clone(), to32(w))?))
                }
                ParamSet::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => LayerParams::BatchNorm(BatchNormParams {
                    gamma: to32(gamma),
                    beta: to32(beta),
                    running_mean: to32(running_mean),
                    running_var: to32(running_var),
                    eps: *eps as f32,
                }),
            };
        }
        g.validate()?;
        Ok(g)
    }

    fn pass<'a>(&'a self, cfg: &'a TrainConfig, training: bool) -> Pass<'a> {
        Pass {
            graph: &self.graph,
            params: &self.params,
            weight_q: &self.weight_q,
            cfg,
            training,
        }
    }
}

fn input_act(g: &ModelGraph, inputs: &Tensor) -> Result<Act> {
    check_input(g, inputs)?;
    Ok(Act {
        shape: inputs.shape().to_vec(),
        data: Payload::Real(inputs.data().iter().map(|&v| v as f64).collect()),
    })
}

/// Training-mode loss (batch statistics) without touching the state.
pub fn batch_loss(state: &TrainState, inputs: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let out = state.pass(cfg, true).forward(input_act(&state.graph, inputs)?)?;
    Ok(cross_entropy(&out.scores, out.classes, labels)?.0)
}

/// Training-mode loss and per-layer parameter gradients.
pub fn loss_and_gradients(
    state: &TrainState,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<LayerGrad>)> {
    let pass = state.pass(cfg, true);
    let out = pass.forward(input_act(&state.graph, inputs)?)?;
    let (loss, grad, _) = cross_entropy(&out.scores, out.classes, labels)?;
    Ok((loss, pass.backward(&out.caches, grad)?))
}

/// One optimization step on a minibatch.
pub fn train_minibatch(
    state: &mut TrainState,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let lr = cfg.schedule.rate(cfg.optimizer.lr(), state.epoch);
    let pass = state.pass(cfg, true);
    let out = pass.forward(input_act(&state.graph, inputs)?)?;
    let (loss, grad, correct) = cross_entropy(&out.scores, out.classes, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at step {}", state.step)));
    }
    let grads = pass.backward(&out.caches, grad)?;
    for (i, g) in grads.iter().enumerate() {
        g.check_finite(i)
            .map_err(|e| Error::NonFinite(format!("{e} at step {}", state.step)))?;
    }
    let batch_stats = out.batch_stats;
    for (i, g) in grads.into_iter().enumerate() {
        let moments = &mut state.moments[i];
        match (&mut state.params[i], g) {
            (ParamSet::Weights(w), LayerGrad::Weights(g)) => {
                optimizer_step(w, &g, &mut moments[0], &cfg.optimizer, lr);
            }
            (
                ParamSet::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                },
                LayerGrad::BatchNorm { gamma: dg, beta: db },
            ) => {
                optimizer_step(gamma, &dg, &mut moments[0], &cfg.optimizer, lr);
                optimizer_step(beta, &db, &mut moments[1], &cfg.optimizer, lr);
                if let Some((mean, var)) = &batch_stats[i] {
                    let m = cfg.bn_momentum;
                    for c in 0..mean.len() {
                        running_mean[c] = (1.0 - m) * running_mean[c] + m * mean[c];
                        running_var[c] = (1.0 - m) * running_var[c] + m * var[c];
                    }
                }
            }
            _ => {}
        }
    }
    for (i, p) in state.params.iter().enumerate() {
        let finite = match p {
            ParamSet::None => true,
            ParamSet::Weights(w) => w.iter().all(|v| v.is_finite()),
            ParamSet::BatchNorm { gamma, beta, .. } => {
                gamma.iter().chain(beta).all(|v| v.is_finite())
            }
        };
        if !finite {
            return Err(Error::NonFinite(format!(
                "parameters of layer {i} after step {}",
                state.step
            )));
        }
    }
    state.step += 1;
    Ok(StepStats {
        loss,
        correct,
        count: labels.len(),
    })
}

const EVAL_BATCH: usize = 256;

/// Inference-mode loss and accuracy (running statistics, training-time
/// quantizers).
pub fn evaluate(state: &TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<StepStats> {
    let mut stats = StepStats {
        loss: 0.0,
        correct: 0,
        count: 0,
    };
    let pass = state.pass(cfg, false);
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let out = pass.forward(input_act(&state.graph, &data.inputs.slice_batch(start, end)?)?)?;
        let (loss, _, correct) = cross_entropy(&out.scores, out.classes, &data.labels[start..end])?;
        stats.loss += loss * (end - start) as f64;
        stats.correct += correct;
        stats.count += end - start;
        start = end;
    }
    if stats.count > 0 {
        stats.loss /= stats.count as f64;
    }
    Ok(stats)
}

/// Random horizontal flip and shift by up to 2 pixels, zero filled.
fn augment<R: Rng>(batch: &mut Tensor, rng: &mut R) -> Result<()> {
    let (n, c, h, w) = batch.dims4()?;
    if h == 1 && w == 1 {
        return Ok(());
    }
    let plane = c * h * w;
    for b in 0..n {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(-2i64..=2);
        let dx = rng.random_range(-2i64..=2);
        let src = batch.data()[b * plane..(b + 1) * plane].to_vec();
        let dst = &mut batch.data_mut()[b * plane..(b + 1) * plane];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 + dy;
                    let sx0 = x as i64 + dx;
                    let sx = if flip { w as i64 - 1 - sx0 } else { sx0 };
                    let inside = (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx);
                    dst[(ch * h + y) * w + x] = if inside {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(())
}

/// One pass over `data` in a seeded shuffled order.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<StepStats> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    state.recalibrate_weight_fsr(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut total = StepStats {
        loss: 0.0,
        correct: 0,
        count: 0,
    };
    for chunk in order.chunks(cfg.batch_size) {
        let mut inputs = data.inputs.gather_batch(chunk)?;
        if cfg.augment {
            augment(&mut inputs, &mut state.rng)?;
        }
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let s = train_minibatch(state, &inputs, &labels, cfg)?;
        total.loss += s.loss * s.count as f64;
        total.correct += s.correct;
        total.count += s.count;
    }
    total.loss /= total.count as f64;
    state.epoch += 1;
    if cfg.bn_refresh > 0 {
        refresh_batchnorm(state, &data.take(cfg.bn_refresh)?, cfg)?;
    }
    Ok(total)
}

/// Replaces the running statistics of every normalization layer by the mean
/// of per-batch statistics over `data`, with parameters held fixed.
pub fn refresh_batchnorm(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Ok(());
    }
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; state.params.len()];
    let mut batches = 0usize;
    let pass = state.pass(cfg, true);
    for start in (0..data.len()).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(data.len());
        if end - start < 2 {
            break;
        }
        let out = pass.forward(input_act(&state.graph, &data.inputs.slice_batch(start, end)?)?)?;
        for (acc, stats) in sums.iter_mut().zip(out.batch_stats) {
            let Some((mean, var)) = stats else { continue };
            match acc {
                None => *acc = Some((mean, var)),
                Some((m, v)) => {
                    m.iter_mut().zip(&mean).for_each(|(a, b)| *a += b);
                    v.iter_mut().zip(&var).for_each(|(a, b)| *a += b);
                }
            }
        }
        batches += 1;
    }
    if batches == 0 {
        return Ok(());
    }
    for (p, acc) in state.params.iter_mut().zip(sums) {
        if let (
            ParamSet::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            Some((m, v)),
        ) = (p, acc)
        {
            *running_mean = m.into_iter().map(|x| x / batches as f64).collect();
            *running_var = v.into_iter().map(|x| x / batches as f64).collect();
        }
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn fit(
    state: &mut TrainState,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let s = train_epoch(state, train, cfg)?;
        let test_acc = if test.is_empty() {
            0.0
        } else {
            evaluate(state, test, cfg)?.accuracy()
        };
        let stats = EpochStats {
            epoch: state.epoch,
            step: state.step,
            loss: s.loss,
            train_acc: s.accuracy(),
            test_acc,
        };
        on_epoch(state, &stats)?;
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lognum::{quantize, dequantize};
    use crate::nn::parse_arch;

    #[test]
    fn dynamic_fsr_examples() {
        assert_eq!(dynamic_gradient_fsr(&[8.0, -1.0], -20), 3);
        assert_eq!(dynamic_gradient_fsr(&[0.5, -5.0], -20), 3);
        assert_eq!(dynamic_gradient_fsr(&[0.0, 0.0], -20), -20);
        assert_eq!(dynamic_gradient_fsr(&[0.0], -7), -7);
        assert_eq!(dynamic_gradient_fsr(&[0.3], -20), -1);
    }

    fn tiny_fc_state(cfg: &TrainConfig, w: [f64; 2]) -> TrainState {
        let g = ModelGraph::new(parse_arch("fc:2").unwrap(), [1, 1, 1], 0).unwrap();
        let mut s = TrainState::from_graph(g, cfg).unwrap();
        s.weights_mut(0).unwrap().copy_from_slice(&w);
        s.recalibrate_weight_fsr(cfg);
        s
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let cfg = TrainConfig {
            optimizer: Optimizer::sgd(0.0, 0.9),
            ..TrainConfig::log_quantized()
        };
        let mut s = tiny_fc_state(&cfg, [0.5, -0.25]);
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let stats = train_minibatch(&mut s, &x, &[0], &cfg).unwrap();
        assert!(stats.loss > 0.0);
        assert_eq!(s.weights(0).unwrap(), &[0.5, -0.25]);
    }

    #[test]
    fn single_layer_hand_step() {
        // scores = W a, g = softmax - onehot, W' = W - g^q a^q
        let wq = QuantizerConfig::log(5, 0).signed();
        let gq = QuantizerConfig::log(5, 0).signed();
        let cfg = TrainConfig {
            weight_q: Some(wq),
            gradient_q: Some(gq),
            activation_q: None,
            optimizer: Optimizer::sgd(1.0, 0.0),
            ..TrainConfig::default()
        };
        let w = [0.5, -0.25];
        let mut s = tiny_fc_state(&cfg, w);
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        s.recalibrate_weight_fsr(&cfg);
        let wcfg = s.weight_quantizer(0).unwrap();
        assert_eq!(wcfg.fsr, -1);
        let w_deq: Vec<f64> = w.iter().map(|&v| dequantize(quantize(v, &wcfg).unwrap(), &wcfg)).collect();
        let scores = [w_deq[0] * 2.0, w_deq[1] * 2.0];
        let z = scores[0].exp() + scores[1].exp();
        let g = [scores[0].exp() / z - 1.0, scores[1].exp() / z];
        let gfsr = dynamic_gradient_fsr(&g, -20);
        let g_deq: Vec<f64> = g
            .iter()
            .map(|&v| dequantize(quantize(v, &gq.with_fsr(gfsr)).unwrap(), &gq.with_fsr(gfsr)))
            .collect();
        train_minibatch(&mut s, &x, &[0], &cfg).unwrap();
        let got = s.weights(0).unwrap();
        for j in 0..2 {
            assert_eq!(got[j], w[j] - g_deq[j] * 2.0);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let cfg = TrainConfig::log_quantized();
        let g = ModelGraph::new(parse_arch("fc:3,relu,logquant:4,fc:2").unwrap(), [2, 1, 1], 0).unwrap();
        let s = TrainState::new(g, &cfg).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        let pass = s.pass(&cfg, true);
        let out = pass.forward(input_act(&s.graph, &x).unwrap()).unwrap();
        let grads = pass.backward(&out.caches, vec![0.0; 2]).unwrap();
        for g in grads {
            if let LayerGrad::Weights(g) = g {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn softmax_must_be_last() {
        let g = ModelGraph::new(parse_arch("fc:2,softmax,fc:2").unwrap(), [2, 1, 1], 0).unwrap();
        assert!(TrainState::new(g, &TrainConfig::float()).is_err());
    }

    #[test]
    fn export_round_trips_parameters() {
        let cfg = TrainConfig::log_quantized();
        let g = ModelGraph::new(parse_arch("conv:2:3:1:1,bn,relu,logquant:4,fc:2").unwrap(), [1, 4, 4], 0)
            .unwrap();
        let s = TrainState::new(g, &cfg).unwrap();
        let e = s.export().unwrap();
        assert_eq!(e.global_fsr, 4);
        assert_eq!(e.layers[0].quant, s.weight_quantizer(0));
        let back = TrainState::from_graph(e, &cfg).unwrap();
        assert_eq!(back.weights(0).unwrap(), s.weights(0).unwrap());
    }

    #[test]
    fn refresh_sets_population_statistics() {
        let mut cfg = TrainConfig::float();
        cfg.batch_size = 4;
        let g = ModelGraph::new(parse_arch("bn,fc:2").unwrap(), [2, 1, 1], 0).unwrap();
        let mut s = TrainState::new(g, &cfg).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 0.0, 2.0, 0.0, 3.0, 4.0, 6.0, 4.0]).unwrap();
        let data = Dataset::new(x, vec![0, 1, 0, 1], 2).unwrap();
        refresh_batchnorm(&mut s, &data, &cfg).unwrap();
        let ParamSet::BatchNorm { running_mean, running_var, .. } = &s.params[0] else {
            panic!("expected normalization parameters");
        };
        assert_eq!(running_mean, &vec![3.0, 2.0]);
        assert_eq!(running_var, &vec![14.0 / 3.0, 16.0 / 3.0]);
    }
}
