//! Forward and backward kernels for the conventional layers: spatial,
//! depthwise and pointwise convolution, batch norm, ReLU, pooling, the
//! fully-connected head and softmax cross-entropy.
//!
//! Convolutions carry no bias; every convolution in the networks here feeds a
//! batch norm. All padding is zero padding.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Output extent of a convolution window sweep.
pub fn conv_out_size(input: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let padded = input + 2 * padding;
    if padded < kernel || input == 0 {
        return Err(Error::invalid(format!(
            "non-positive output size: input {input}, kernel {kernel}, padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Weights `(out, in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialKernel<T = f32> {
    pub weights: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> SpatialKernel<T> {
    pub fn new(weights: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w || s.h % 2 == 0 {
            return Err(Error::invalid(format!("spatial kernel must be odd and square, got {s}")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        Ok(SpatialKernel {
            weights,
            stride,
            padding,
        })
    }

    /// Same-size padding `floor(k / 2)`.
    pub fn same(weights: Tensor<T>, stride: usize) -> Result<Self> {
        let pad = weights.shape().h / 2;
        Self::new(weights, stride, pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn size(&self) -> usize {
        self.weights.shape().h
    }
}

/// Weights `(channels, 1, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseKernel<T = f32> {
    pub weights: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> DepthwiseKernel<T> {
    pub fn new(weights: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let s = weights.shape();
        if s.c != 1 || s.h != s.w || s.h % 2 == 0 {
            return Err(Error::invalid(format!(
                "depthwise kernel must be (C, 1, k, k) with odd k, got {s}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        Ok(DepthwiseKernel {
            weights,
            stride,
            padding,
        })
    }

    pub fn same(weights: Tensor<T>, stride: usize) -> Result<Self> {
        let pad = weights.shape().h / 2;
        Self::new(weights, stride, pad)
    }

    pub fn channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn size(&self) -> usize {
        self.weights.shape().h
    }
}

/// The `M x N` matrix of a 1x1 convolution, stored `(1, 1, M, N)` so that row
/// `m` holds input channel `m`'s weights to every output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseKernel<T = f32> {
    pub weights: Tensor<T>,
}

impl<T: Real> PointwiseKernel<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::invalid(format!("pointwise kernel must be (1, 1, M, N), got {s}")));
        }
        Ok(PointwiseKernel { weights })
    }

    pub fn from_rows(m: usize, n: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::from_vec(Shape::new(1, 1, m, n), data)?)
    }

    pub fn identity(m: usize) -> Self {
        let mut w = Tensor::zeros(Shape::new(1, 1, m, m));
        for i in 0..m {
            w.set(0, 0, i, i, T::one());
        }
        PointwiseKernel { weights: w }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().h
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().w
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> T {
        self.weights.data()[m * self.out_channels() + n]
    }

    pub fn row(&self, m: usize) -> &[T] {
        let n = self.out_channels();
        &self.weights.data()[m * n..(m + 1) * n]
    }
}

fn check_channels(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ChannelMismatch {
            op,
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_shape(op: &'static str, expected: Shape, actual: Shape) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            expected,
            actual,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Spatial convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: Shape, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(ConvGeom {
            c: input.c,
            h: input.h,
            w: input.w,
            k,
            stride,
            pad,
            ho: conv_out_size(input.h, k, pad, stride)?,
            wo: conv_out_size(input.w, k, pad, stride)?,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = (c * self.k + i) * self.k + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy as usize >= self.h {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *v = if ix < 0 || ix as usize >= self.w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = (c * self.k + i) * self.k + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_spatial<T: Real>(x: &Tensor<T>, kernel: &SpatialKernel<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_channels("conv2d_spatial", kernel.in_channels(), s.c)?;
    let g = ConvGeom::new(s, kernel.size(), kernel.stride, kernel.padding)?;
    let out_c = kernel.out_channels();
    let mut out = Tensor::zeros(Shape::new(s.n, out_c, g.ho, g.wo));
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    let (rows, cols) = (g.rows(), g.cols());
    for n in 0..s.n {
        g.im2col(x.item(n), &mut col);
        T::gemm(
            out_c,
            rows,
            cols,
            T::one(),
            kernel.weights.data(),
            rows as isize,
            1,
            &col,
            cols as isize,
            1,
            T::zero(),
            out.item_mut(n),
            cols as isize,
            1,
        );
    }
    Ok(out)
}

/// Returns `(dx, dweights)`.
pub fn conv2d_spatial_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &SpatialKernel<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    check_channels("conv2d_spatial_backward", kernel.in_channels(), s.c)?;
    let g = ConvGeom::new(s, kernel.size(), kernel.stride, kernel.padding)?;
    let out_c = kernel.out_channels();
    check_shape(
        "conv2d_spatial_backward",
        Shape::new(s.n, out_c, g.ho, g.wo),
        dy.shape(),
    )?;
    let (rows, cols) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(kernel.weights.shape());
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = vec![T::zero(); rows * cols];
    for n in 0..s.n {
        g.im2col(x.item(n), &mut col);
        let dyn_ = dy.item(n);
        // dW (out x rows) += dY (out x cols) * col^T (cols x rows)
        T::gemm(
            out_c,
            cols,
            rows,
            T::one(),
            dyn_,
            cols as isize,
            1,
            &col,
            1,
            cols as isize,
            T::one(),
            dw.data_mut(),
            rows as isize,
            1,
        );
        // dcol (rows x cols) = W^T (rows x out) * dY (out x cols)
        T::gemm(
            rows,
            out_c,
            cols,
            T::one(),
            kernel.weights.data(),
            1,
            rows as isize,
            dyn_,
            cols as isize,
            1,
            T::zero(),
            &mut dcol,
            cols as isize,
            1,
        );
        g.col2im(&dcol, dx.item_mut(n));
    }
    Ok((dx, dw))
}

// ---------------------------------------------------------------------------
// Depthwise convolution (direct loops)
// ---------------------------------------------------------------------------

pub fn conv2d_depthwise<T: Real>(x: &Tensor<T>, kernel: &DepthwiseKernel<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_channels("conv2d_depthwise", kernel.channels(), s.c)?;
    let k = kernel.size();
    let (stride, pad) = (kernel.stride, kernel.padding as isize);
    let ho = conv_out_size(s.h, k, kernel.padding, stride)?;
    let wo = conv_out_size(s.w, k, kernel.padding, stride)?;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    // Per-tap column ranges whose input index lands inside the row.
    let cols: Vec<(usize, usize)> = (0..k)
        .map(|j| {
            let off = j as isize - pad;
            let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
            let hi = if s.w as isize - off <= 0 {
                0
            } else {
                ((s.w as isize - off - 1) as usize / stride + 1).min(wo)
            };
            (lo.min(wo), hi.max(lo.min(wo)))
        })
        .collect();
    for n in 0..s.n {
        for c in 0..s.c {
            let taps = kernel.weights.item(c);
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            // Every output starts at +0 and adds its taps in row-major order,
            // so a one-hot kernel reproduces a pure copy bit for bit.
            for i in 0..k {
                for (j, &(lo, hi)) in cols.iter().enumerate() {
                    if lo >= hi {
                        continue;
                    }
                    let t = taps[i * k + j];
                    let off = j as isize - pad;
                    for oy in 0..ho {
                        let iy = (oy * stride + i) as isize - pad;
                        if iy < 0 || iy as usize >= s.h {
                            continue;
                        }
                        let row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let a = (lo as isize + off) as usize;
                            for (d, &v) in drow[lo..hi].iter_mut().zip(&row[a..a + (hi - lo)]) {
                                *d += t * v;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                                *d += t * row[((ox * stride) as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_depthwise_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &DepthwiseKernel<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    check_channels("conv2d_depthwise_backward", kernel.channels(), s.c)?;
    let k = kernel.size();
    let (stride, pad) = (kernel.stride, kernel.padding as isize);
    let ho = conv_out_size(s.h, k, kernel.padding, stride)?;
    let wo = conv_out_size(s.w, k, kernel.padding, stride)?;
    check_shape(
        "conv2d_depthwise_backward",
        Shape::new(s.n, s.c, ho, wo),
        dy.shape(),
    )?;
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(kernel.weights.shape());
    for n in 0..s.n {
        for c in 0..s.c {
            let taps = kernel.weights.item(c).to_vec();
            let src = x.plane(n, c).to_vec();
            let g = dy.plane(n, c);
            let mut dtaps = vec![T::zero(); k * k];
            let dst = dx.plane_mut(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[oy * wo + ox];
                    for i in 0..k {
                        let iy = (oy * stride + i) as isize - pad;
                        if iy < 0 || iy as usize >= s.h {
                            continue;
                        }
                        for j in 0..k {
                            let ix = (ox * stride + j) as isize - pad;
                            if ix < 0 || ix as usize >= s.w {
                                continue;
                            }
                            let idx = iy as usize * s.w + ix as usize;
                            dst[idx] += taps[i * k + j] * gv;
                            dtaps[i * k + j] += src[idx] * gv;
                        }
                    }
                }
            }
            for (a, b) in dw.item_mut(c).iter_mut().zip(&dtaps) {
                *a += *b;
            }
        }
    }
    Ok((dx, dw))
}

// ---------------------------------------------------------------------------
// Pointwise convolution
// ---------------------------------------------------------------------------

pub fn strided_size(d: usize, stride: usize) -> usize {
    if d == 0 {
        0
    } else {
        (d - 1) / stride + 1
    }
}

fn subsample<T: Real>(src: &[T], c: usize, h: usize, w: usize, stride: usize, dst: &mut [T]) {
    let (ho, wo) = (strided_size(h, stride), strided_size(w, stride));
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(ch * ho + oy) * wo + ox] = src[(ch * h + oy * stride) * w + ox * stride];
            }
        }
    }
}

pub fn conv2d_pointwise<T: Real>(
    x: &Tensor<T>,
    kernel: &PointwiseKernel<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let s = x.shape();
    let (m, nout) = (kernel.in_channels(), kernel.out_channels());
    check_channels("conv2d_pointwise", m, s.c)?;
    let (ho, wo) = (strided_size(s.h, stride), strided_size(s.w, stride));
    let p = ho * wo;
    let mut out = Tensor::zeros(Shape::new(s.n, nout, ho, wo));
    let mut sub = if stride > 1 { vec![T::zero(); m * p] } else { Vec::new() };
    for n in 0..s.n {
        let src: &[T] = if stride > 1 {
            subsample(x.item(n), m, s.h, s.w, stride, &mut sub);
            &sub
        } else {
            x.item(n)
        };
        // out (N x P) = P^T (N x M) * X (M x P)
        T::gemm(
            nout,
            m,
            p,
            T::one(),
            kernel.weights.data(),
            1,
            nout as isize,
            src,
            p as isize,
            1,
            T::zero(),
            out.item_mut(n),
            p as isize,
            1,
        );
    }
    Ok(out)
}

pub fn conv2d_pointwise_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &PointwiseKernel<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    let (m, nout) = (kernel.in_channels(), kernel.out_channels());
    check_channels("conv2d_pointwise_backward", m, s.c)?;
    let (ho, wo) = (strided_size(s.h, stride), strided_size(s.w, stride));
    check_shape(
        "conv2d_pointwise_backward",
        Shape::new(s.n, nout, ho, wo),
        dy.shape(),
    )?;
    let p = ho * wo;
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(kernel.weights.shape());
    let mut sub = vec![T::zero(); if stride > 1 { m * p } else { 0 }];
    let mut dsub = vec![T::zero(); if stride > 1 { m * p } else { 0 }];
    for n in 0..s.n {
        let g = dy.item(n);
        let src: &[T] = if stride > 1 {
            subsample(x.item(n), m, s.h, s.w, stride, &mut sub);
            &sub
        } else {
            x.item(n)
        };
        // dP (M x N) += X (M x P) * dY^T (P x N)
        T::gemm(
            m,
            p,
            nout,
            T::one(),
            src,
            p as isize,
            1,
            g,
            1,
            p as isize,
            T::one(),
            dw.data_mut(),
            nout as isize,
            1,
        );
        // dX (M x P) = P (M x N) * dY (N x P)
        if stride == 1 {
            T::gemm(
                m,
                nout,
                p,
                T::one(),
                kernel.weights.data(),
                nout as isize,
                1,
                g,
                p as isize,
                1,
                T::zero(),
                dx.item_mut(n),
                p as isize,
                1,
            );
        } else {
            T::gemm(
                m,
                nout,
                p,
                T::one(),
                kernel.weights.data(),
                nout as isize,
                1,
                g,
                p as isize,
                1,
                T::zero(),
                &mut dsub,
                p as isize,
                1,
            );
            let item = dx.item_mut(n);
            for ch in 0..m {
                for oy in 0..ho {
                    for ox in 0..wo {
                        item[(ch * s.h + oy * stride) * s.w + ox * stride] =
                            dsub[(ch * ho + oy) * wo + ox];
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel affine parameters are `(1, C, 1, 1)` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::full(shape, T::one()),
            beta: Tensor::zeros(shape),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

/// Saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let s = x.shape();
    check_channels("batch_norm", state.channels(), s.c)?;
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::invalid("batch norm over an empty batch"));
    }
    let eps = T::of(state.epsilon);
    let mut mean = vec![T::zero(); s.c];
    let mut inv_std = vec![T::zero(); s.c];
    match mode {
        Mode::Train => {
            let mut var = vec![0.0f64; s.c];
            for c in 0..s.c {
                let mut sum = 0.0f64;
                for n in 0..s.n {
                    sum += x.plane(n, c).iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0f64;
                for n in 0..s.n {
                    sq += x
                        .plane(n, c)
                        .iter()
                        .map(|v| (v.to_f64().unwrap() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[c] = T::of(mu);
                var[c] = sq / count as f64;
                inv_std[c] = T::one() / (T::of(var[c]) + eps).sqrt();
            }
            let mom = state.momentum;
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for c in 0..s.c {
                let rm = state.running_mean.data()[c].to_f64().unwrap();
                let rv = state.running_var.data()[c].to_f64().unwrap();
                state.running_mean.data_mut()[c] =
                    T::of(mom * rm + (1.0 - mom) * mean[c].to_f64().unwrap());
                state.running_var.data_mut()[c] = T::of(mom * rv + (1.0 - mom) * var[c] * unbias);
            }
        }
        Mode::Eval => {
            for c in 0..s.c {
                mean[c] = state.running_mean.data()[c];
                inv_std[c] = T::one() / (state.running_var.data()[c] + eps).sqrt();
            }
        }
    }
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is) = (mean[c], inv_std[c]);
            let (g, b) = (state.gamma.data()[c], state.beta.data()[c]);
            let src = x.plane(n, c);
            let xh = xhat.plane_mut(n, c);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mu) * is;
            }
            let xh = xhat.plane(n, c).to_vec();
            for (o, v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *o = g * v + b;
            }
        }
    }
    Ok((y, BatchNormCache { xhat, inv_std, mode }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = cache.xhat.shape();
    check_shape("batch_norm_backward", s, dy.shape())?;
    check_channels("batch_norm_backward", gamma.shape().c, s.c)?;
    let count = T::of((s.n * s.plane()) as f64);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for c in 0..s.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            for (&g, &xh) in dy.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        dgamma.data_mut()[c] = sum_dy_xhat;
        dbeta.data_mut()[c] = sum_dy;
        let gi = gamma.data()[c] * cache.inv_std[c];
        for n in 0..s.n {
            let g = dy.plane(n, c).to_vec();
            let xh = cache.xhat.plane(n, c).to_vec();
            let out = dx.plane_mut(n, c);
            match cache.mode {
                Mode::Train => {
                    for ((o, gv), xv) in out.iter_mut().zip(g).zip(xh) {
                        *o = gi * (gv - sum_dy / count - xv * sum_dy_xhat / count);
                    }
                }
                Mode::Eval => {
                    for (o, gv) in out.iter_mut().zip(g) {
                        *o = gi * gv;
                    }
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Elementwise and pooling
// ---------------------------------------------------------------------------

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_shape("relu_backward", x.shape(), dy.shape())?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// 2x2 average pool with stride 2. Spatial dims must be even.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::invalid(format!("avg_pool2 needs even spatial dims, got {s}")));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..ho {
                let r0 = &src[2 * oy * s.w..(2 * oy + 1) * s.w];
                let r1 = &src[(2 * oy + 1) * s.w..(2 * oy + 2) * s.w];
                for ox in 0..wo {
                    dst[oy * wo + ox] =
                        (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Real>(input: Shape, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (ho, wo) = (input.h / 2, input.w / 2);
    check_shape(
        "avg_pool2_backward",
        Shape::new(input.n, input.c, ho, wo),
        dy.shape(),
    )?;
    let quarter = T::of(0.25);
    let mut dx = Tensor::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            let g = dy.plane(n, c).to_vec();
            let dst = dx.plane_mut(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = g[oy * wo + ox] * quarter;
                    dst[2 * oy * input.w + 2 * ox] = v;
                    dst[2 * oy * input.w + 2 * ox + 1] = v;
                    dst[(2 * oy + 1) * input.w + 2 * ox] = v;
                    dst[(2 * oy + 1) * input.w + 2 * ox + 1] = v;
                }
            }
        }
    }
    Ok(dx)
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::of(1.0 / s.plane() as f64);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let sum: T = x.plane(n, c).iter().copied().sum();
            out.set(n, c, 0, 0, sum * inv);
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(input: Shape, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_shape(
        "global_avg_pool_backward",
        Shape::new(input.n, input.c, 1, 1),
        dy.shape(),
    )?;
    let inv = T::of(1.0 / input.plane() as f64);
    let mut dx = Tensor::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            let v = dy.get(n, c, 0, 0) * inv;
            dx.plane_mut(n, c).fill(v);
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Fully-connected head and loss
// ---------------------------------------------------------------------------

/// `x` is `(N, in, 1, 1)`, `weight` is `(1, 1, in, out)`, `bias` is `(1, out, 1, 1)`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let (fin, fout) = (weight.shape().h, weight.shape().w);
    if s.h != 1 || s.w != 1 {
        return Err(Error::invalid(format!("linear expects (N, C, 1, 1) input, got {s}")));
    }
    check_channels("linear", fin, s.c)?;
    check_channels("linear bias", fout, bias.shape().c)?;
    let mut out = Tensor::zeros(Shape::new(s.n, fout, 1, 1));
    for n in 0..s.n {
        out.item_mut(n).copy_from_slice(bias.data());
    }
    T::gemm(
        s.n,
        fin,
        fout,
        T::one(),
        x.data(),
        fin as isize,
        1,
        weight.data(),
        fout as isize,
        1,
        T::one(),
        out.data_mut(),
        fout as isize,
        1,
    );
    Ok(out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    let (fin, fout) = (weight.shape().h, weight.shape().w);
    check_channels("linear_backward", fin, s.c)?;
    check_shape("linear_backward", Shape::new(s.n, fout, 1, 1), dy.shape())?;
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(Shape::new(1, fout, 1, 1));
    // dx (N x in) = dy (N x out) * W^T (out x in)
    T::gemm(
        s.n,
        fout,
        fin,
        T::one(),
        dy.data(),
        fout as isize,
        1,
        weight.data(),
        1,
        fout as isize,
        T::zero(),
        dx.data_mut(),
        fin as isize,
        1,
    );
    // dW (in x out) = x^T (in x N) * dy (N x out)
    T::gemm(
        fin,
        s.n,
        fout,
        T::one(),
        x.data(),
        1,
        fin as isize,
        dy.data(),
        fout as isize,
        1,
        T::zero(),
        dw.data_mut(),
        fout as isize,
        1,
    );
    for n in 0..s.n {
        for (b, &g) in db.data_mut().iter_mut().zip(dy.item(n)) {
            *b += g;
        }
    }
    Ok((dx, dw, db))
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::invalid(format!("logits must be (N, K, 1, 1), got {s}")));
    }
    if labels.len() != s.n {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let k = s.c;
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0f64;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
        }
        let row: Vec<f64> = logits.item(n).iter().map(|v| v.to_f64().unwrap()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        for (j, g) in grad.item_mut(n).iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            let t = if j == label { 1.0 } else { 0.0 };
            *g = T::of((p - t) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

// ---------------------------------------------------------------------------
// Tagged backward dispatch
// ---------------------------------------------------------------------------

/// What a forward call saved, tagged by op.
pub enum Saved<'a, T: Real> {
    Spatial {
        input: &'a Tensor<T>,
        kernel: &'a SpatialKernel<T>,
    },
    Depthwise {
        input: &'a Tensor<T>,
        kernel: &'a DepthwiseKernel<T>,
    },
    Pointwise {
        input: &'a Tensor<T>,
        kernel: &'a PointwiseKernel<T>,
        stride: usize,
    },
    BatchNorm {
        cache: &'a BatchNormCache<T>,
        gamma: &'a Tensor<T>,
    },
    Relu {
        input: &'a Tensor<T>,
    },
    AvgPool2 {
        input: Shape,
    },
    GlobalAvgPool {
        input: Shape,
    },
    Linear {
        input: &'a Tensor<T>,
        weight: &'a Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: &'a Tensor<T>,
        labels: &'a [usize],
    },
}

/// Gradient w.r.t. the op input plus one tensor per parameter, in the op's
/// parameter order (e.g. `[dgamma, dbeta]` for batch norm).
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub input: Tensor<T>,
    pub params: Vec<Tensor<T>>,
}

/// For softmax cross-entropy `upstream` is the `(1, 1, 1, 1)` loss seed.
pub fn layer_backward<T: Real>(saved: Saved<'_, T>, upstream: &Tensor<T>) -> Result<Gradients<T>> {
    Ok(match saved {
        Saved::Spatial { input, kernel } => {
            let (dx, dw) = conv2d_spatial_backward(input, kernel, upstream)?;
            Gradients {
                input: dx,
                params: vec![dw],
            }
        }
        Saved::Depthwise { input, kernel } => {
            let (dx, dw) = conv2d_depthwise_backward(input, kernel, upstream)?;
            Gradients {
                input: dx,
                params: vec![dw],
            }
        }
        Saved::Pointwise {
            input,
            kernel,
            stride,
        } => {
            let (dx, dw) = conv2d_pointwise_backward(input, kernel, stride, upstream)?;
            Gradients {
                input: dx,
                params: vec![dw],
            }
        }
        Saved::BatchNorm { cache, gamma } => {
            let (dx, dg, db) = batch_norm_backward(cache, gamma, upstream)?;
            Gradients {
                input: dx,
                params: vec![dg, db],
            }
        }
        Saved::Relu { input } => Gradients {
            input: relu_backward(input, upstream)?,
            params: vec![],
        },
        Saved::AvgPool2 { input } => Gradients {
            input: avg_pool2_backward(input, upstream)?,
            params: vec![],
        },
        Saved::GlobalAvgPool { input } => Gradients {
            input: global_avg_pool_backward(input, upstream)?,
            params: vec![],
        },
        Saved::Linear { input, weight } => {
            let (dx, dw, db) = linear_backward(input, weight, upstream)?;
            Gradients {
                input: dx,
                params: vec![dw, db],
            }
        }
        Saved::SoftmaxCrossEntropy { logits, labels } => {
            check_shape("softmax_cross_entropy", Shape::new(1, 1, 1, 1), upstream.shape())?;
            let (_, g) = softmax_cross_entropy(logits, labels)?;
            Gradients {
                input: g.scale(upstream.data()[0]),
                params: vec![],
            }
        }
    })
}
