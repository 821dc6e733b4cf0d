//! Labeled datasets and the bundled synthetic generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples `(N, C, H, W)` with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::LengthMismatch {
                left: n,
                right: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {bad} out of {classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> Result<[usize; 3]> {
        let (_, c, h, w) = self.inputs.dims4()?;
        Ok([c, h, w])
    }

    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Dataset::new(
            self.inputs.slice_batch(0, n)?,
            self.labels[..n].to_vec(),
            self.classes,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.inputs.gather_batch(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }
}

/// Two linearly separable classes in the plane, with a margin around the
/// separating line. Samples are `(N, 2)`.
pub fn separable_2d(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (nx, ny) = (angle.cos(), angle.sin());
    let offset: f64 = rng.random_range(-0.2..0.2);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y: f64 = rng.random_range(-1.0..1.0);
        let d = nx * x + ny * y - offset;
        if d.abs() < 0.1 {
            continue;
        }
        data.extend([x as f32, y as f32]);
        labels.push((d > 0.0) as usize);
    }
    Dataset::new(Tensor::new(vec![n, 2], data).expect("sized"), labels, 2).expect("labels in range")
}

/// Classes of [`shapes_dataset`].
pub const SHAPE_CLASSES: [&str; 4] = ["hbar", "vbar", "box", "cross"];

/// Pixel noise deviation used by default for [`shapes_dataset`].
pub const DEFAULT_SHAPES_NOISE: f64 = 0.35;

/// Single-channel `size x size` images of a horizontal bar, vertical bar,
/// hollow box or diagonal cross at random position, scale and brightness,
/// plus Gaussian pixel noise of deviation `noise`. Pixel values lie in
/// `[0, 1]`.
pub fn shapes_dataset(n: usize, size: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if size < 6 {
        return Err(Error::config("shape images need at least 6x6 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, noise).map_err(|e| Error::config(e.to_string()))?;
    let mut data = vec![0.0f32; n * size * size];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_mut(size * size).enumerate() {
        let class = i % SHAPE_CLASSES.len();
        let class = (class + rng.random_range(0..SHAPE_CLASSES.len())) % SHAPE_CLASSES.len();
        let brightness: f64 = rng.random_range(0.5..1.0);
        let extent = rng.random_range(size / 3..=size - 2);
        let x0 = rng.random_range(0..=size - extent);
        let y0 = rng.random_range(0..=size - extent);
        let mut set = |x: usize, y: usize| img[y * size + x] = brightness as f32;
        match class {
            0 => {
                let y = y0 + extent / 2;
                (x0..x0 + extent).for_each(|x| set(x, y));
            }
            1 => {
                let x = x0 + extent / 2;
                (y0..y0 + extent).for_each(|y| set(x, y));
            }
            2 => {
                for t in 0..extent {
                    set(x0 + t, y0);
                    set(x0 + t, y0 + extent - 1);
                    set(x0, y0 + t);
                    set(x0 + extent - 1, y0 + t);
                }
            }
            _ => {
                for t in 0..extent {
                    set(x0 + t, y0 + t);
                    set(x0 + extent - 1 - t, y0 + t);
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 1, size, size], data)?, labels, SHAPE_CLASSES.len())
}
