//! Forward and backward kernels, plus their [`DiffOp`] wrappers.
//!
//! Image tensors are `N x C x H x W`. Convolutions are lowered to GEMM via
//! `im2col`, using the cross-correlation convention. Convolution weights are
//! `O x I x K x K`; the transposed convolution reuses the same layout with the
//! roles of the two channel axes swapped, so that it is the adjoint of
//! [`conv2d`] for an identical weight tensor.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{DiffOp, Scalar, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of [`Activation::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Spatial bookkeeping for a convolution whose *input* is `batch x channels
/// x height x width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::shape(
                "conv",
                format!("kernel ({kernel}) and stride ({stride}) must be positive"),
            ));
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::shape(
                "conv",
                format!(
                    "kernel {kernel} does not fit a {height}x{width} input with padding {pad}"
                ),
            ));
        }
        Ok(ConvGeometry {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn patch_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn patch_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (input.saturating_sub(1)) * stride + kernel;
    if input == 0 || grown <= 2 * pad {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input extent {input} with kernel {kernel}, stride {stride}, pad {pad} yields no output"),
        ));
    }
    Ok(grown - 2 * pad)
}

/// Unfolds receptive fields into a `(C*K*K) x (N*OH*OW)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let spatial = g.out_h * g.out_w;
    let ncols = g.patch_cols();
    let mut cols = vec![T::zero(); g.patch_rows() * ncols];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    let dst = &mut dst[n * spatial..(n + 1) * spatial];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst[oh * g.out_w + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back, summing overlaps.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let spatial = g.out_h * g.out_w;
    let ncols = g.patch_cols();
    let plane = g.height * g.width;
    let mut x = vec![T::zero(); g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let srcs = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    let src = &srcs[n * spatial..(n + 1) * spatial];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst_row[iw as usize] += src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `N x C x L` to `C x (N*L)`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * l + b * l..ch * n * l + (b + 1) * l]
                .copy_from_slice(&x[(b * c + ch) * l..(b * c + ch + 1) * l]);
        }
    }
    out
}

/// `C x (N*L)` to `N x C x L`.
fn from_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * l..(b * c + ch + 1) * l]
                .copy_from_slice(&x[ch * n * l + b * l..ch * n * l + (b + 1) * l]);
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, l: usize) {
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            for v in &mut out[(b * c + ch) * l..(b * c + ch + 1) * l] {
                *v += bv;
            }
        }
    }
}

fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.dim(0), x.dim(1));
    let l = x.row_len() / c;
    let mut sums = vec![T::zero(); c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += x.data()[(b * c + ch) * l..(b * c + ch + 1) * l].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], sums).expect("channel count")
}

fn check_conv_weight<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    in_axis: usize,
) -> Result<usize> {
    x.expect_ndim(4, op, "input")?;
    w.expect_ndim(4, op, "weight")?;
    let k = w.dim(2);
    if w.dim(3) != k {
        return Err(Error::shape(op, format!("kernel must be square, weight is {:?}", w.shape())));
    }
    if w.dim(in_axis) != x.dim(1) {
        return Err(Error::shape(
            op,
            format!(
                "input has {} channels but weight {:?} expects {}",
                x.dim(1),
                w.shape(),
                w.dim(in_axis)
            ),
        ));
    }
    if let Some(b) = bias {
        let out_ch = w.dim(1 - in_axis);
        if b.shape() != [out_ch] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?} does not match {out_ch} output channels", b.shape()),
            ));
        }
    }
    Ok(k)
}

/// 2-D cross-correlation. `x: N x C x H x W`, `w: O x C x K x K`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let k = check_conv_weight("conv2d", x, w, bias, 1)?;
    let g = ConvGeometry::new(x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, pad)?;
    let o = w.dim(0);
    let cols = im2col(x.data(), &g);
    let mut out_cm = vec![T::zero(); o * g.patch_cols()];
    gemm(false, false, o, g.patch_cols(), g.patch_rows(), T::one(), w.data(), &cols, T::zero(), &mut out_cm);
    let spatial = g.out_h * g.out_w;
    let mut out = from_channel_major(&out_cm, g.batch, o, spatial);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), g.batch, o, spatial);
    }
    Tensor::new(&[g.batch, o, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to `(x, w, bias)`.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    needs: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let k = check_conv_weight("conv2d_backward", x, w, None, 1)?;
    let g = ConvGeometry::new(x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, pad)?;
    let o = w.dim(0);
    let expect = [g.batch, o, g.out_h, g.out_w];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv2d_backward",
            format!("output gradient {:?} should be {expect:?}", grad_out.shape()),
        ));
    }
    let spatial = g.out_h * g.out_w;
    let go_cm = to_channel_major(grad_out.data(), g.batch, o, spatial);
    let dw = if needs[1] {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![T::zero(); w.len()];
        gemm(false, true, o, g.patch_rows(), g.patch_cols(), T::one(), &go_cm, &cols, T::zero(), &mut dw);
        Some(Tensor::new(w.shape(), dw)?)
    } else {
        None
    };
    let dx = if needs[0] {
        let mut dcols = vec![T::zero(); g.patch_rows() * g.patch_cols()];
        gemm(true, false, g.patch_rows(), g.patch_cols(), o, T::one(), w.data(), &go_cm, T::zero(), &mut dcols);
        Some(Tensor::new(x.shape(), col2im(&dcols, &g))?)
    } else {
        None
    };
    let db = needs[2].then(|| channel_sums(grad_out));
    Ok((dx, dw, db))
}

/// Transposed convolution. `x: N x I x H x W`, `w: I x O x K x K`; output
/// extent `(H - 1) * stride - 2 * pad + K`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let k = check_conv_weight("conv_transpose2d", x, w, bias, 0)?;
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let co = w.dim(1);
    let oh = conv_transpose_extent(h, k, stride, pad)?;
    let ow = conv_transpose_extent(wd, k, stride, pad)?;
    let g = ConvGeometry::new(n, co, oh, ow, k, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, wd));
    let x_cm = to_channel_major(x.data(), n, ci, h * wd);
    let mut cols = vec![T::zero(); g.patch_rows() * g.patch_cols()];
    gemm(true, false, g.patch_rows(), g.patch_cols(), ci, T::one(), w.data(), &x_cm, T::zero(), &mut cols);
    let mut out = col2im(&cols, &g);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), n, co, oh * ow);
    }
    Tensor::new(&[n, co, oh, ow], out)
}

/// Gradients of [`conv_transpose2d`] with respect to `(x, w, bias)`.
#[allow(clippy::type_complexity)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    needs: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let k = check_conv_weight("conv_transpose2d_backward", x, w, None, 0)?;
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let co = w.dim(1);
    let oh = conv_transpose_extent(h, k, stride, pad)?;
    let ow = conv_transpose_extent(wd, k, stride, pad)?;
    if grad_out.shape() != [n, co, oh, ow] {
        return Err(Error::shape(
            "conv_transpose2d_backward",
            format!("output gradient {:?} should be {:?}", grad_out.shape(), [n, co, oh, ow]),
        ));
    }
    let g = ConvGeometry::new(n, co, oh, ow, k, stride, pad)?;
    let cols_g = im2col(grad_out.data(), &g);
    let dx = if needs[0] {
        let mut dx_cm = vec![T::zero(); ci * n * h * wd];
        gemm(false, false, ci, g.patch_cols(), g.patch_rows(), T::one(), w.data(), &cols_g, T::zero(), &mut dx_cm);
        Some(Tensor::new(x.shape(), from_channel_major(&dx_cm, n, ci, h * wd))?)
    } else {
        None
    };
    let dw = if needs[1] {
        let x_cm = to_channel_major(x.data(), n, ci, h * wd);
        let mut dw = vec![T::zero(); w.len()];
        gemm(false, true, ci, g.patch_rows(), g.patch_cols(), T::one(), &x_cm, &cols_g, T::zero(), &mut dw);
        Some(Tensor::new(w.shape(), dw)?)
    } else {
        None
    };
    let db = needs[2].then(|| channel_sums(grad_out));
    Ok((dx, dw, db))
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * T::from_f64_lossy(LEAKY_RELU_SLOPE)
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative given the input `x` and the output `y = f(x)`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64_lossy(LEAKY_RELU_SLOPE)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Affine map `x * w^T + bias` for `x: B x N`, `w: M x N`, `bias: M`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, n) = x.matrix_dims("linear")?;
    let (m, n2) = w.matrix_dims("linear")?;
    if n != n2 {
        return Err(Error::shape(
            "linear",
            format!("input {:?} does not match weight {:?}", x.shape(), w.shape()),
        ));
    }
    let mut out = vec![T::zero(); b * m];
    if let Some(bias) = bias {
        if bias.shape() != [m] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match {m} outputs", bias.shape()),
            ));
        }
        for row in out.chunks_mut(m) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(false, true, b, m, n, T::one(), x.data(), w.data(), T::one(), &mut out);
    Tensor::new(&[b, m], out)
}

/// Running statistics tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise with batch statistics and update the running statistics.
    Train,
    /// Normalise with the running statistics.
    Eval,
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let l = x.row_len() / c;
    let count = T::from_usize(n * l).expect("count");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.data()[(b * c + ch) * l..(b * c + ch + 1) * l].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * l..(b * c + ch + 1) * l] {
                q += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = q / count;
    }
    (mean, var)
}

fn check_norm_params<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    x.expect_ndim(4, "batchnorm2d", "input")?;
    let c = x.dim(1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "gamma {:?} / beta {:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

fn normalize_affine<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Tensor<T> {
    let (n, c) = (x.dim(0), x.dim(1));
    let l = x.row_len() / c;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let inv = T::one() / (var[ch] + eps).sqrt();
            let (gm, bt, mu) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
            for v in &mut out[(b * c + ch) * l..(b * c + ch + 1) * l] {
                *v = gm * (*v - mu) * inv + bt;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Batch normalisation over `N x C x H x W`. In [`NormMode::Train`] the
/// batch statistics are used and `running` is updated with `momentum`
/// (unbiased variance); in [`NormMode::Eval`] `running` is used as is.
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: NormMode,
    running: &mut RunningStats<T>,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    check_norm_params(x, gamma, beta)?;
    let eps_t = T::from_f64_lossy(eps);
    match mode {
        NormMode::Train => {
            if x.dim(0) < 2 {
                return Err(Error::InvalidArgument(
                    "batchnorm2d in train mode needs a batch of at least 2 samples".into(),
                ));
            }
            let (mean, var) = channel_moments(x);
            update_running(running, &mean, &var, x.len() / x.dim(1), momentum);
            Ok(normalize_affine(x, gamma, beta, &mean, &var, eps_t))
        }
        NormMode::Eval => Ok(normalize_affine(
            x,
            gamma,
            beta,
            running.mean.data(),
            running.var.data(),
            eps_t,
        )),
    }
}

pub(crate) fn update_running<T: Scalar>(
    running: &mut RunningStats<T>,
    mean: &[T],
    var: &[T],
    count: usize,
    momentum: f64,
) {
    let m = T::from_f64_lossy(momentum);
    let keep = T::one() - m;
    let unbias = if count > 1 {
        T::from_f64_lossy(count as f64 / (count - 1) as f64)
    } else {
        T::one()
    };
    for (r, &mu) in running.mean.data_mut().iter_mut().zip(mean) {
        *r = keep * *r + m * mu;
    }
    for (r, &v) in running.var.data_mut().iter_mut().zip(var) {
        *r = keep * *r + m * v * unbias;
    }
}

/// Differentiable 2-D convolution. Inputs `[x, w]` or `[x, w, bias]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> DiffOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        conv2d(inputs[0], inputs[1], inputs.get(2).copied(), self.stride, self.pad)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let has_bias = inputs.len() > 2;
        let (dx, dw, db) = conv2d_backward(
            inputs[0],
            inputs[1],
            self.stride,
            self.pad,
            grad_output,
            [needs[0], needs[1], has_bias && needs[2]],
        )?;
        let mut out = vec![dx, dw];
        if has_bias {
            out.push(db);
        }
        Ok(out)
    }
}

/// Differentiable transposed convolution. Inputs `[x, w]` or `[x, w, bias]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> DiffOp<T> for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        conv_transpose2d(inputs[0], inputs[1], inputs.get(2).copied(), self.stride, self.pad)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let has_bias = inputs.len() > 2;
        let (dx, dw, db) = conv_transpose2d_backward(
            inputs[0],
            inputs[1],
            self.stride,
            self.pad,
            grad_output,
            [needs[0], needs[1], has_bias && needs[2]],
        )?;
        let mut out = vec![dx, dw];
        if has_bias {
            out.push(db);
        }
        Ok(out)
    }
}

/// Differentiable batch normalisation. Inputs `[x, gamma, beta]`.
///
/// With `running == None` the batch statistics are used (training mode);
/// otherwise the given statistics are treated as constants.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub eps: f64,
    pub running: Option<RunningStats<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn train(eps: f64) -> Self {
        BatchNorm2d { eps, running: None }
    }

    pub fn eval(eps: f64, running: RunningStats<T>) -> Self {
        BatchNorm2d {
            eps,
            running: Some(running),
        }
    }
}

impl<T: Scalar> DiffOp<T> for BatchNorm2d<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        check_norm_params(x, gamma, beta)?;
        let eps = T::from_f64_lossy(self.eps);
        match &self.running {
            None => {
                if x.dim(0) < 2 {
                    return Err(Error::InvalidArgument(
                        "batchnorm2d in train mode needs a batch of at least 2 samples".into(),
                    ));
                }
                let (mean, var) = channel_moments(x);
                Ok(normalize_affine(x, gamma, beta, &mean, &var, eps))
            }
            Some(r) => Ok(normalize_affine(x, gamma, beta, r.mean.data(), r.var.data(), eps)),
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c) = (x.dim(0), x.dim(1));
        let l = x.row_len() / c;
        let eps = T::from_f64_lossy(self.eps);
        let (mean, var) = match &self.running {
            None => channel_moments(x),
            Some(r) => (r.mean.data().to_vec(), r.var.data().to_vec()),
        };
        let count = T::from_usize(n * l).expect("count");
        let gy = grad_output.data();
        let xd = x.data();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); x.len()];
        for ch in 0..c {
            let inv = T::one() / (var[ch] + eps).sqrt();
            let mu = mean[ch];
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for b in 0..n {
                let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                for (&g, &v) in gy[r.clone()].iter().zip(&xd[r]) {
                    sum_g += g;
                    sum_gx += g * (v - mu) * inv;
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            if !needs[0] {
                continue;
            }
            let gm = gamma.data()[ch];
            for b in 0..n {
                let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                for i in r {
                    dx[i] = match self.running {
                        None => {
                            let xhat = (xd[i] - mu) * inv;
                            gm * inv * (gy[i] - sum_g / count - xhat * sum_gx / count)
                        }
                        Some(_) => gm * inv * gy[i],
                    };
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape(), dx)).transpose()?,
            needs[1].then(|| Tensor::new(&[c], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new(&[c], dbeta)).transpose()?,
        ])
    }
}

/// Elementwise activation as a [`DiffOp`].
#[derive(Debug, Clone, Copy)]
pub struct ActivationOp(pub Activation);

impl<T: Scalar> DiffOp<T> for ActivationOp {
    fn name(&self) -> &'static str {
        "activation"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(activation(inputs[0], self.0))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let kind = self.0;
        let data = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad_output.data())
            .map(|((&x, &y), &g)| g * kind.derivative(x, y))
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }
}

/// Affine layer as a [`DiffOp`]. Inputs `[x, w]` or `[x, w, bias]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear;

impl<T: Scalar> DiffOp<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        linear(inputs[0], inputs[1], inputs.get(2).copied())
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, n) = x.matrix_dims("linear_backward")?;
        let m = w.dim(0);
        let g = grad_output.data();
        let dx = if needs[0] {
            let mut dx = vec![T::zero(); b * n];
            gemm(false, false, b, n, m, T::one(), g, w.data(), T::zero(), &mut dx);
            Some(Tensor::new(&[b, n], dx)?)
        } else {
            None
        };
        let dw = if needs[1] {
            let mut dw = vec![T::zero(); m * n];
            gemm(true, false, m, n, b, T::one(), g, x.data(), T::zero(), &mut dw);
            Some(Tensor::new(&[m, n], dw)?)
        } else {
            None
        };
        let mut out = vec![dx, dw];
        if inputs.len() > 2 {
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); m];
                for row in g.chunks(m) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::new(&[m], db).expect("bias shape")
            });
            out.push(db);
        }
        Ok(out)
    }
}

/// Reinterprets the element order under a new shape.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub shape: Vec<usize>,
}

impl<T: Scalar> DiffOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        inputs[0].reshape(&self.shape)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad_output.reshape(inputs[0].shape())?)])
    }
}

/// Matrix transpose.
#[derive(Debug, Clone, Copy)]
pub struct Transpose2d;

impl<T: Scalar> DiffOp<T> for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        inputs[0].transpose2d()
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad_output.transpose2d()?)])
    }
}

/// Sum of all elements.
#[derive(Debug, Clone, Copy)]
pub struct SumAll;

impl<T: Scalar> DiffOp<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(inputs[0].sum()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad_output.item()?))])
    }
}

/// `sum_i weight_i * input_i` over one-element inputs.
#[derive(Debug, Clone)]
pub struct WeightedSum {
    pub weights: Vec<f64>,
}

impl WeightedSum {
    pub fn new(weights: Vec<f64>) -> Self {
        WeightedSum { weights }
    }
}

impl<T: Scalar> DiffOp<T> for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if inputs.len() != self.weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} inputs", self.weights.len(), inputs.len()),
            ));
        }
        let mut total = T::zero();
        for (t, &w) in inputs.iter().zip(&self.weights) {
            total += T::from_f64_lossy(w) * t.item()?;
        }
        Ok(Tensor::scalar(total))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad_output.item()?;
        Ok(self
            .weights
            .iter()
            .zip(needs)
            .map(|(&w, &need)| need.then(|| Tensor::scalar(g * T::from_f64_lossy(w))))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_all_ones() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[1., -2., 3., 0.5, 7., -1.]).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::<f64>::ones(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        let w = Tensor::<f64>::ones(&[1, 2, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn conv_transpose_stamps_kernel() {
        let x = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let w = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_transpose_extent_formula() {
        assert_eq!(conv_transpose_extent(2, 4, 2, 1).unwrap(), 4);
        assert_eq!(conv_transpose_extent(1, 2, 1, 0).unwrap(), 2);
        assert_eq!(conv_transpose_extent(16, 4, 2, 1).unwrap(), 32);
    }

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::from_f64(&[3], &[-1., 0., 2.]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0., 0., 2.]);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert!((Activation::LeakyRelu.apply(-3.0f64) + 0.6).abs() < 1e-15);
        assert!(Activation::Sigmoid.apply(-800.0f64).is_finite());
    }

    #[test]
    fn linear_identity_and_constant() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let mut eye = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(&[3]))).unwrap(), x);
        let b = Tensor::<f64>::from_f64(&[2], &[0.5, -1.0]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[2, 3]), Some(&b)).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0]);
        assert!(linear(&x, &Tensor::zeros(&[2, 4]), None).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 2.0, 3.0, &mut rng);
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::zeros(&[3]);
        let mut running = RunningStats::new(3);
        let y = batchnorm2d(&x, &gamma, &beta, NormMode::Train, &mut running, 0.1, 1e-5).unwrap();
        let (mean, var) = channel_moments(&y);
        for c in 0..3 {
            assert!(mean[c].abs() <= 1e-6);
            assert!((var[c] - 1.0).abs() <= 1e-4);
        }
        assert!(running.mean.data().iter().all(|&m| (m - 0.2).abs() < 0.2));
        assert!(running.mean.data().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.2);
        let mut running = RunningStats::new(1);
        let y = batchnorm2d(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), NormMode::Train, &mut running, 0.1, 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_single_sample_train_is_an_error() {
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let mut running = RunningStats::new(2);
        let r = batchnorm2d(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), NormMode::Train, &mut running, 0.1, 1e-5);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        // eval mode is fine with one sample
        assert!(batchnorm2d(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), NormMode::Eval, &mut running, 0.1, 1e-5).is_ok());
    }
}
