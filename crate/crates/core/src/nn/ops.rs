//! Elementwise and windowed layer operations.

use crate::error::{Error, Result};
use crate::lognum::LogCode;
use crate::tensor::{QTensor, Tensor};

pub fn relu(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// ReLU on codes: negative codes become the zero code.
pub fn relu_codes(t: &QTensor) -> QTensor {
    t.map_codes(|c| if c.is_negative() { LogCode::ZERO } else { c })
}

/// Order key shared by log and linear codes of one config.
#[inline]
pub(crate) fn code_key(c: LogCode) -> i64 {
    if c.is_negative() {
        -(c.code() as i64)
    } else {
        c.code() as i64
    }
}

/// Window geometry for pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::shape("pool kernel and stride must be positive"));
        }
        if h < self.kernel || w < self.kernel {
            return Err(Error::shape(format!(
                "pool window {} larger than input {h}x{w}",
                self.kernel
            )));
        }
        Ok(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }
}

/// Argmax index (into the input payload) for every pooled output, first
/// index winning ties.
pub(crate) fn pool_argmax<T>(
    data: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    geom: &PoolGeometry,
    greater: impl Fn(&T, &T) -> bool,
) -> Result<(Vec<usize>, usize, usize)> {
    let (oh, ow) = geom.output_hw(h, w)?;
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * geom.stride * w + ox * geom.stride;
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        let i = base + (oy * geom.stride + ky) * w + ox * geom.stride + kx;
                        if greater(&data[i], &data[best]) {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, oh, ow))
}

/// Max pooling; also returns the argmax routing used by the backward pass.
pub fn maxpool_with_indices(t: &Tensor, geom: &PoolGeometry) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = t.dims4()?;
    let (idx, oh, ow) = pool_argmax(t.data(), (n, c, h, w), geom, |a, b| a > b)?;
    let data = idx.iter().map(|&i| t.data()[i]).collect();
    Ok((Tensor::new(vec![n, c, oh, ow], data)?, idx))
}

pub fn maxpool(t: &Tensor, geom: &PoolGeometry) -> Result<Tensor> {
    maxpool_with_indices(t, geom).map(|(out, _)| out)
}

pub fn maxpool_codes(t: &QTensor, geom: &PoolGeometry) -> Result<QTensor> {
    let (n, c, h, w) = t.dims4()?;
    let (idx, oh, ow) = pool_argmax(t.codes(), (n, c, h, w), geom, |a, b| {
        code_key(*a) > code_key(*b)
    })?;
    let codes = idx.iter().map(|&i| t.codes()[i]).collect();
    QTensor::new(vec![n, c, oh, ow], codes, *t.cfg())
}

/// Per-channel affine normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub const DEFAULT_EPS: f32 = 1e-5;

    /// `gamma = 1`, `beta = 0`, unit running variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let lens = [
            self.gamma.len(),
            self.beta.len(),
            self.running_mean.len(),
            self.running_var.len(),
        ];
        if lens.iter().any(|&l| l != channels) {
            return Err(Error::shape(format!(
                "batchnorm parameters {lens:?} do not match {channels} channels"
            )));
        }
        if !(self.eps > 0.0) || self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("batchnorm variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-channel batch mean and biased variance over `N x H x W`.
pub fn batch_stats(t: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = t.dims4()?;
    let count = (n * h * w) as f64;
    if count == 0.0 {
        return Err(Error::Empty("batch statistics"));
    }
    let hw = h * w;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let s: f64 = t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&v| v as f64)
                .sum();
            mean[ch] += s;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            let s: f64 = t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum();
            var[ch] += s;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel.
pub fn batchnorm_apply(
    t: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if [mean.len(), var.len(), gamma.len(), beta.len()].iter().any(|&l| l != c) {
        return Err(Error::shape(format!("batchnorm over {c} channels got mismatched params")));
    }
    let hw = h * w;
    let mut out = t.clone();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps as f64).sqrt();
            let (g, be, m) = (gamma[ch] as f64, beta[ch] as f64, mean[ch]);
            for v in &mut out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = (g * (*v as f64 - m) * inv + be) as f32;
            }
        }
    }
    Ok(out)
}

/// Inference-mode normalization with running statistics.
pub fn batchnorm_forward(t: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    let (_, c, _, _) = t.dims4()?;
    params.validate(c)?;
    let mean: Vec<f64> = params.running_mean.iter().map(|&v| v as f64).collect();
    let var: Vec<f64> = params.running_var.iter().map(|&v| v as f64).collect();
    batchnorm_apply(t, &mean, &var, &params.gamma, &params.beta, params.eps)
}

/// Row-wise softmax over the class dimension of an `(N, K)` tensor.
pub fn softmax(t: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = t.dims4()?;
    if h * w != 1 {
        return Err(Error::shape("softmax expects (N, K) scores"));
    }
    let mut out = Tensor::new(vec![n, k], t.data().to_vec())?;
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = ((*v - m) as f64).exp();
            sum += e;
            *v = e as f32;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// scores.
pub fn softmax_cross_entropy(scores: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (n, k, h, w) = scores.dims4()?;
    if h * w != 1 {
        return Err(Error::shape("loss expects (N, K) scores"));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("loss batch"));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f64; n * k];
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Domain(format!("label {label} out of {k} classes")));
        }
        let row = &scores.data()[b * k..(b + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        let log_sum = sum.ln() + m;
        loss += log_sum - row[label] as f64;
        for j in 0..k {
            let p = (row[j] as f64 - log_sum).exp();
            grad[b * k + j] = (p - (j == label) as u8 as f64) / n as f64;
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok((loss, grad))
}

/// Index of the largest score per row, first index on ties.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let (n, k, h, w) = t.dims4()?;
    let k = k * h * w;
    Ok((0..n)
        .map(|b| {
            let row = &t.data()[b * k..(b + 1) * k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lognum::QuantizerConfig;
    use crate::tensor::quantize_tensor;

    #[test]
    fn relu_examples() {
        let t = Tensor::from_vec(vec![-1.0, 2.0]);
        assert_eq!(relu(&t).data(), &[0.0, 2.0]);
        assert!(relu(&Tensor::full(vec![3], -2.0)).data().iter().all(|&v| v == 0.0));
        assert_eq!(relu(&relu(&t)), relu(&t));
    }

    #[test]
    fn relu_on_codes_matches_real() {
        let cfg = QuantizerConfig::log(4, 3).signed();
        let t = Tensor::from_vec(vec![-3.0, -0.5, 0.0, 0.7, 6.0]);
        let q = quantize_tensor(&t, &cfg).unwrap();
        assert_eq!(relu_codes(&q).dequantize(), relu(&q.dequantize()));
    }

    #[test]
    fn maxpool_examples() {
        let g = PoolGeometry::new(2, 2);
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool(&t, &g).unwrap().data(), &[4.0]);
        let c = Tensor::full(vec![2, 3, 4, 6], 1.5);
        let p = maxpool(&c, &g).unwrap();
        assert_eq!(p.shape(), &[2, 3, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let t = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let (_, idx) = maxpool_with_indices(&t, &PoolGeometry::new(2, 2)).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn maxpool_on_codes_matches_real() {
        let cfg = QuantizerConfig::log(4, 3).signed();
        let t = Tensor::new(vec![1, 1, 2, 4], vec![-3.0, -0.5, 0.0, 0.7, 6.0, -1.0, -2.0, -4.0])
            .unwrap();
        let q = quantize_tensor(&t, &cfg).unwrap();
        let g = PoolGeometry::new(2, 2);
        assert_eq!(
            maxpool_codes(&q, &g).unwrap().dequantize(),
            maxpool(&q.dequantize(), &g).unwrap()
        );
    }

    #[test]
    fn batchnorm_batch_stats_normalize() {
        let t = Tensor::new(
            vec![2, 2, 1, 2],
            vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0],
        )
        .unwrap();
        let (mean, var) = batch_stats(&t).unwrap();
        let out = batchnorm_apply(&t, &mean, &var, &[1.0; 2], &[0.0; 2], 1e-5).unwrap();
        let (m2, v2) = batch_stats(&out).unwrap();
        for ch in 0..2 {
            assert!(m2[ch].abs() < 1e-6);
            assert!((v2[ch] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut p = BatchNormParams::identity(2);
        p.gamma = vec![0.0; 2];
        p.beta = vec![0.5, -1.5];
        let t = Tensor::new(vec![1, 2, 1, 2], vec![3.0, 7.0, -2.0, 9.0]).unwrap();
        assert_eq!(batchnorm_forward(&t, &p).unwrap().data(), &[0.5, 0.5, -1.5, -1.5]);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut p = BatchNormParams::identity(1);
        p.running_mean = vec![2.0];
        p.running_var = vec![4.0 - 1e-5];
        let t = Tensor::new(vec![2, 1], vec![4.0, 0.0]).unwrap();
        let out = batchnorm_forward(&t, &p).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6 && (out.data()[1] + 1.0).abs() < 1e-6);
        assert!(batchnorm_forward(&t, &BatchNormParams::identity(3)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap();
        let s = softmax(&t).unwrap();
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(argmax_rows(&s).unwrap(), vec![2, 0]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&t, &[1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.5, -0.5]);
        assert!(softmax_cross_entropy(&t, &[2]).is_err());
    }
}
