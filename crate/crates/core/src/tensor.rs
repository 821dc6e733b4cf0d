//! Dense row-major tensors over `f32` values or quantizer codes.

use crate::error::{Error, Result};
use crate::lognum::{dequantize, quantize_unchecked, LogCode, QuantizerConfig};

/// Real-valued tensor, row-major (NCHW for activations).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(N, C, H, W)`; rank-2 tensors are read as `(N, C, 1, 1)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        dims4(&self.shape)
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = *self.shape.first().ok_or(Error::Empty("tensor"))?;
        if start > end || end > n {
            return Err(Error::shape(format!("batch slice {start}..{end} of {n}")));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * row..end * row].to_vec())
    }

    /// Gathers rows of the leading dimension in the given order.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = *self.shape.first().ok_or(Error::Empty("tensor"))?;
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return Err(Error::shape(format!("row {i} out of {n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        [n, c] => Ok((n, c, 1, 1)),
        _ => Err(Error::shape(format!("expected rank 2 or 4, got {shape:?}"))),
    }
}

/// Tensor of quantizer codes sharing one [`QuantizerConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    codes: Vec<LogCode>,
    cfg: QuantizerConfig,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<LogCode>, cfg: QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        let expected: usize = shape.iter().product();
        if expected != codes.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} elements, payload has {}",
                codes.len()
            )));
        }
        for c in &codes {
            c.check(&cfg)?;
        }
        Ok(Self { shape, codes, cfg })
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, codes: Vec<LogCode>, cfg: QuantizerConfig) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), codes.len());
        Self { shape, codes, cfg }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn codes(&self) -> &[LogCode] {
        &self.codes
    }

    #[inline]
    pub fn cfg(&self) -> &QuantizerConfig {
        &self.cfg
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.codes, self.cfg)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        dims4(&self.shape)
    }

    /// Elementwise [`dequantize`] into `f32`.
    pub fn dequantize(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .codes
                .iter()
                .map(|&c| dequantize(c, &self.cfg) as f32)
                .collect(),
        }
    }

    /// Elementwise [`dequantize`] in `f64`.
    pub fn dequantize_f64(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| dequantize(c, &self.cfg)).collect()
    }

    pub(crate) fn map_codes(&self, f: impl Fn(LogCode) -> LogCode) -> QTensor {
        QTensor {
            shape: self.shape.clone(),
            codes: self.codes.iter().map(|&c| f(c)).collect(),
            cfg: self.cfg,
        }
    }
}

/// Elementwise quantization; shape is preserved.
pub fn quantize_tensor(t: &Tensor, cfg: &QuantizerConfig) -> Result<QTensor> {
    cfg.validate()?;
    let mut codes = Vec::with_capacity(t.len());
    for &v in t.data() {
        if !v.is_finite() {
            return Err(Error::Domain(format!("cannot quantize non-finite value {v}")));
        }
        if v < 0.0 && !cfg.signed {
            return Err(Error::NegativeUnsigned(v as f64));
        }
        codes.push(quantize_unchecked(v as f64, cfg));
    }
    Ok(QTensor::new_unchecked(t.shape.clone(), codes, *cfg))
}

/// Kernel geometry for convolution lowering and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::shape("kernel and stride must be positive"));
        }
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// Lowers an NCHW payload to a `[C*Kh*Kw, N*OH*OW]` matrix. Padding cells
/// hold `zero`.
pub fn im2col_slice<T: Copy>(
    data: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    geom: &ConvGeometry,
    zero: T,
) -> Result<(Vec<T>, usize, usize)> {
    if data.len() != n * c * h * w {
        return Err(Error::shape("im2col payload does not match dims"));
    }
    let (oh, ow) = geom.output_hw(h, w)?;
    let rows = c * geom.kernel_h * geom.kernel_w;
    let cols = n * oh * ow;
    let mut out = vec![zero; rows * cols];
    for ch in 0..c {
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let row = (ch * geom.kernel_h + ki) * geom.kernel_w + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        let y = (oy * geom.stride + ki) as isize - geom.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let x = (ox * geom.stride + kj) as isize - geom.pad as isize;
                            if x >= 0 && x < w as isize {
                                dst[base + ox] = plane[y as usize * w + x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, rows, cols))
}

/// Scatter-adds a `[C*Kh*Kw, N*OH*OW]` matrix back onto an NCHW buffer.
pub fn col2im_add(
    cols: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    geom: &ConvGeometry,
) -> Result<Vec<f64>> {
    let (oh, ow) = geom.output_hw(h, w)?;
    let ncols = n * oh * ow;
    if cols.len() != c * geom.kernel_h * geom.kernel_w * ncols {
        return Err(Error::shape("col2im payload does not match dims"));
    }
    let mut out = vec![0.0f64; n * c * h * w];
    for ch in 0..c {
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let row = (ch * geom.kernel_h + ki) * geom.kernel_w + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let plane = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        let y = (oy * geom.stride + ki) as isize - geom.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * geom.stride + kj) as isize - geom.pad as isize;
                            if x >= 0 && x < w as isize {
                                plane[y as usize * w + x as usize] += src[(b * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// [`im2col_slice`] over a real tensor.
pub fn im2col(t: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (cols, rows, ncols) = im2col_slice(t.data(), t.dims4()?, geom, 0.0)?;
    Tensor::new(vec![rows, ncols], cols)
}

/// [`im2col_slice`] over codes; padding is the zero code.
pub fn im2col_codes(t: &QTensor, geom: &ConvGeometry) -> Result<QTensor> {
    let (cols, rows, ncols) = im2col_slice(t.codes(), t.dims4()?, geom, LogCode::ZERO)?;
    Ok(QTensor::new_unchecked(vec![rows, ncols], cols, *t.cfg()))
}

/// Transpose of a row-major `rows x cols` matrix.
pub(crate) fn transpose<T: Copy>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(m.len(), rows * cols);
    let mut out = Vec::with_capacity(m.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(m[r * cols + c]);
        }
    }
    out
}
