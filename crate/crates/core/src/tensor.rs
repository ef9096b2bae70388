//! Dense row-major float32 tensors plus the numeric kernels shared by the
//! forward pass, the tape, and the bound engine.
//!
//! Kernels are generic over the element type: the production path runs them
//! at `f32`, the finite-difference oracle replays recorded tapes at `f64`.
//! All accumulation orders are fixed so results are bit-reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar extraction; panics unless the tensor holds exactly one element.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather rows (leading-dimension slices) by index, preserving order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        assert!(!self.shape.is_empty(), "select_rows needs a batch dimension");
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            assert!(i < self.shape[0], "row {i} out of range");
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape[1..]);
        Tensor { shape, data }
    }

    /// Index of the first maximum along a length-`k` row. Rows are the
    /// trailing dimension of a `[n, k]` tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.shape.len(), 2, "argmax_rows expects [n, k]");
        let k = self.shape[1];
        self.data
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Output spatial size of a convolution: floor((in + 2p - k) / s) + 1.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidInput("conv stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidInput(format!(
            "conv kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn idx4(n: usize, c: usize, y: usize, x: usize, ch: usize, h: usize, w: usize) -> usize {
    ((n * ch + c) * h + y) * w + x
}

/// Numeric kernels. Element type `T` is f32 in production, f64 in the
/// finite-difference replay.
pub(crate) mod kernels {
    use num_traits::Float;

    use super::idx4;

    pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// y = x * w^T (+ b): x is [rows, in], w is [out, in], b is [out].
    pub fn affine<T: Float>(
        x: &[T],
        w: &[T],
        b: Option<&[T]>,
        rows: usize,
        in_f: usize,
        out_f: usize,
    ) -> Vec<T> {
        let mut out = vec![T::zero(); rows * out_f];
        for r in 0..rows {
            for o in 0..out_f {
                let mut acc = match b {
                    Some(b) => b[o],
                    None => T::zero(),
                };
                for i in 0..in_f {
                    acc = acc + x[r * in_f + i] * w[o * in_f + i];
                }
                out[r * out_f + o] = acc;
            }
        }
        out
    }

    #[derive(Clone, Copy, Debug)]
    pub struct ConvGeom {
        pub batch: usize,
        pub in_c: usize,
        pub in_h: usize,
        pub in_w: usize,
        pub out_c: usize,
        pub kernel: usize,
        pub stride: usize,
        pub padding: usize,
        pub out_h: usize,
        pub out_w: usize,
    }

    pub fn conv2d<T: Float>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
        let mut out = vec![T::zero(); g.batch * g.out_c * g.out_h * g.out_w];
        for n in 0..g.batch {
            for o in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = match b {
                            Some(b) => b[o],
                            None => T::zero(),
                        };
                        for c in 0..g.in_c {
                            for ky in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                if iy < 0 || iy >= g.in_h as isize {
                                    continue;
                                }
                                for kx in 0..g.kernel {
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if ix < 0 || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi =
                                        idx4(n, c, iy as usize, ix as usize, g.in_c, g.in_h, g.in_w);
                                    let wi = ((o * g.in_c + c) * g.kernel + ky) * g.kernel + kx;
                                    acc = acc + x[xi] * w[wi];
                                }
                            }
                        }
                        out[idx4(n, o, oy, ox, g.out_c, g.out_h, g.out_w)] = acc;
                    }
                }
            }
        }
        out
    }

    /// Gradient of conv2d wrt its input; also the transpose of the induced
    /// linear operator, reused when back-substituting linear bounds.
    pub fn conv2d_input_grad<T: Float>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
        let mut gx = vec![T::zero(); g.batch * g.in_c * g.in_h * g.in_w];
        for n in 0..g.batch {
            for o in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let gout = gy[idx4(n, o, oy, ox, g.out_c, g.out_h, g.out_w)];
                        for c in 0..g.in_c {
                            for ky in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                if iy < 0 || iy >= g.in_h as isize {
                                    continue;
                                }
                                for kx in 0..g.kernel {
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if ix < 0 || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi =
                                        idx4(n, c, iy as usize, ix as usize, g.in_c, g.in_h, g.in_w);
                                    let wi = ((o * g.in_c + c) * g.kernel + ky) * g.kernel + kx;
                                    gx[xi] = gx[xi] + gout * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn conv2d_weight_grad<T: Float>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
        let mut gw = vec![T::zero(); g.out_c * g.in_c * g.kernel * g.kernel];
        for n in 0..g.batch {
            for o in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let gout = gy[idx4(n, o, oy, ox, g.out_c, g.out_h, g.out_w)];
                        for c in 0..g.in_c {
                            for ky in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                if iy < 0 || iy >= g.in_h as isize {
                                    continue;
                                }
                                for kx in 0..g.kernel {
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if ix < 0 || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi =
                                        idx4(n, c, iy as usize, ix as usize, g.in_c, g.in_h, g.in_w);
                                    let wi = ((o * g.in_c + c) * g.kernel + ky) * g.kernel + kx;
                                    gw[wi] = gw[wi] + gout * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        gw
    }

    pub fn conv2d_bias_grad<T: Float>(gy: &[T], g: &ConvGeom) -> Vec<T> {
        let mut gb = vec![T::zero(); g.out_c];
        for n in 0..g.batch {
            for o in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        gb[o] = gb[o] + gy[idx4(n, o, oy, ox, g.out_c, g.out_h, g.out_w)];
                    }
                }
            }
        }
        gb
    }

    /// Per-channel batch statistics of a [n, c, ...] buffer. Variance is the
    /// biased estimator (the one used for normalization).
    pub fn channel_stats<T: Float>(x: &[T], channels: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
        let batch = x.len() / (channels * spatial);
        let count = T::from(batch * spatial).unwrap();
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for c in 0..channels {
            let mut acc = T::zero();
            for n in 0..batch {
                for s in 0..spatial {
                    acc = acc + x[(n * channels + c) * spatial + s];
                }
            }
            mean[c] = acc / count;
        }
        for c in 0..channels {
            let mut acc = T::zero();
            for n in 0..batch {
                for s in 0..spatial {
                    let d = x[(n * channels + c) * spatial + s] - mean[c];
                    acc = acc + d * d;
                }
            }
            var[c] = acc / count;
        }
        (mean, var)
    }

    /// Train-mode batch norm. Returns (y, batch_mean, batch_var).
    pub fn batchnorm_train<T: Float>(
        x: &[T],
        channels: usize,
        spatial: usize,
        gamma: &[T],
        beta: &[T],
        eps: T,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (mean, var) = channel_stats(x, channels, spatial);
        let batch = x.len() / (channels * spatial);
        let mut y = vec![T::zero(); x.len()];
        for c in 0..channels {
            let inv = T::one() / (var[c] + eps).sqrt();
            for n in 0..batch {
                for s in 0..spatial {
                    let i = (n * channels + c) * spatial + s;
                    y[i] = (x[i] - mean[c]) * inv * gamma[c] + beta[c];
                }
            }
        }
        (y, mean, var)
    }

    /// y = x * scale[c] (+ shift[c]), broadcast over batch and spatial dims.
    pub fn channel_affine<T: Float>(
        x: &[T],
        channels: usize,
        spatial: usize,
        scale: &[T],
        shift: Option<&[T]>,
    ) -> Vec<T> {
        let batch = x.len() / (channels * spatial);
        let mut y = vec![T::zero(); x.len()];
        for n in 0..batch {
            for c in 0..channels {
                for s in 0..spatial {
                    let i = (n * channels + c) * spatial + s;
                    y[i] = match shift {
                        Some(t) => x[i] * scale[c] + t[c],
                        None => x[i] * scale[c],
                    };
                }
            }
        }
        y
    }

    /// Mean cross-entropy of [n, k] logits against integer labels,
    /// max-subtracted for stability.
    pub fn cross_entropy<T: Float>(logits: &[T], n: usize, k: usize, labels: &[usize]) -> T {
        let mut total = T::zero();
        for r in 0..n {
            let row = &logits[r * k..(r + 1) * k];
            let mut m = row[0];
            for &v in row.iter().skip(1) {
                if v > m {
                    m = v;
                }
            }
            let mut lse = T::zero();
            for &v in row.iter() {
                lse = lse + (v - m).exp();
            }
            total = total + (lse.ln() + m - row[labels[r]]);
        }
        total / T::from(n).unwrap()
    }

    /// Row-wise softmax of [n, k] logits.
    pub fn softmax<T: Float>(logits: &[T], n: usize, k: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n * k];
        for r in 0..n {
            let row = &logits[r * k..(r + 1) * k];
            let mut m = row[0];
            for &v in row.iter().skip(1) {
                if v > m {
                    m = v;
                }
            }
            let mut denom = T::zero();
            for &v in row.iter() {
                denom = denom + (v - m).exp();
            }
            for j in 0..k {
                out[r * k + j] = (row[j] - m).exp() / denom;
            }
        }
        out
    }

    /// Adversary's favorite logits inside the bounds: the true class takes
    /// its lower bound, every other class its upper bound.
    pub fn worst_case_logits<T: Float>(
        lower: &[T],
        upper: &[T],
        n: usize,
        k: usize,
        labels: &[usize],
    ) -> Vec<T> {
        let mut out = vec![T::zero(); n * k];
        for r in 0..n {
            for j in 0..k {
                let i = r * k + j;
                out[i] = if j == labels[r] { lower[i] } else { upper[i] };
            }
        }
        out
    }

    pub fn sum<T: Float>(x: &[T]) -> T {
        let mut acc = T::zero();
        for &v in x {
            acc = acc + v;
        }
        acc
    }
}
