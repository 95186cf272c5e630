//! Rank-3 tensor type and the numeric primitives used by the networks.
//!
//! Tensors are laid out row-major as `[height][width][channel]`, so the
//! channel values of one pixel are contiguous. Every primitive comes as a
//! pure forward function plus a matching backward function; the autodiff
//! tape in [`crate::autograd`] strings them together.

use crate::error::{Error, Result};

/// Floating-point scalar the engine is generic over.
///
/// Training and inference run at `f32`; gradient checking rebuilds the same
/// networks at `f64` so central finite differences have headroom.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense `[height][width][channel]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidDimension(format!(
                "tensor dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "tensor {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::filled(h, w, c, T::zero())
    }

    pub fn filled(h: usize, w: usize, c: usize, v: T) -> Self {
        assert!(h > 0 && w > 0 && c > 0, "tensor dimensions must be positive");
        Self { h, w, c, data: vec![v; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: T) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    /// Channel slice of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "expected {:?}, got {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Convolution weights stored as `[k_h][k_w][in_channel][out_channel]` with a
/// per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub k_h: usize,
    pub k_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(
        k_h: usize,
        k_w: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if k_h == 0 || k_w == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidDimension(
                "kernel dimensions must be positive".into(),
            ));
        }
        if weights.len() != k_h * k_w * in_channels * out_channels {
            return Err(Error::ShapeMismatch(format!(
                "kernel {k_h}x{k_w}x{in_channels}x{out_channels} needs {} weights, got {}",
                k_h * k_w * in_channels * out_channels,
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "kernel needs {out_channels} bias values, got {}",
                bias.len()
            )));
        }
        Ok(Self { k_h, k_w, in_channels, out_channels, weights, bias })
    }

    pub fn zeros(k_h: usize, k_w: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            k_h,
            k_w,
            in_channels,
            out_channels,
            weights: vec![T::zero(); k_h * k_w * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    #[inline]
    pub fn weight_idx(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.k_w + kx) * self.in_channels + ci) * self.out_channels + co
    }

    pub fn view(&self) -> KernelView<'_, T> {
        KernelView {
            k_h: self.k_h,
            k_w: self.k_w,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: &self.weights,
            bias: &self.bias,
        }
    }
}

/// Borrowed view of kernel weights; lets the tape share parameter storage.
#[derive(Copy, Clone)]
pub struct KernelView<'a, T> {
    pub k_h: usize,
    pub k_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: &'a [T],
    pub bias: &'a [T],
}

/// Gradients of a convolution with respect to its kernel.
pub struct KernelGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

fn check_kernel_input<T: Real>(input: &Tensor<T>, k: &KernelView<'_, T>) -> Result<()> {
    if input.channels() != k.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {} input channels, tensor has {}",
            k.in_channels,
            input.channels()
        )));
    }
    Ok(())
}

/// 2-D convolution, stride 1, zero padding chosen so the output keeps the
/// input's spatial size. Kernel sides must be odd.
pub fn conv2d<T: Real>(input: &Tensor<T>, k: KernelView<'_, T>) -> Result<Tensor<T>> {
    check_kernel_input(input, &k)?;
    if k.k_h % 2 == 0 || k.k_w % 2 == 0 {
        return Err(Error::InvalidDimension(format!(
            "same-padding convolution needs odd kernel sides, got {}x{}",
            k.k_h, k.k_w
        )));
    }
    let (h, w, in_c) = input.shape();
    let out_c = k.out_channels;
    let (ph, pw) = ((k.k_h - 1) / 2, (k.k_w - 1) / 2);
    let mut out = Tensor::zeros(h, w, out_c);
    let in_data = input.data();
    let out_data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let opx = &mut out_data[(y * w + x) * out_c..][..out_c];
            opx.copy_from_slice(k.bias);
            for ky in 0..k.k_h {
                let sy = y + ky;
                if sy < ph || sy >= h + ph {
                    continue;
                }
                let iy = sy - ph;
                for kx in 0..k.k_w {
                    let sx = x + kx;
                    if sx < pw || sx >= w + pw {
                        continue;
                    }
                    let ix = sx - pw;
                    let ipx = &in_data[(iy * w + ix) * in_c..][..in_c];
                    let mut wofs = ((ky * k.k_w + kx) * in_c) * out_c;
                    for &a in ipx {
                        let wrow = &k.weights[wofs..wofs + out_c];
                        for (ov, &wv) in opx.iter_mut().zip(wrow) {
                            *ov = *ov + a * wv;
                        }
                        wofs += out_c;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]: gradients w.r.t. the input and the kernel.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    k: KernelView<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, KernelGrad<T>)> {
    let (h, w, in_c) = input.shape();
    if grad_out.shape() != (h, w, k.out_channels) {
        return Err(Error::ShapeMismatch(format!(
            "conv2d backward: output gradient {:?} does not match {:?}",
            grad_out.shape(),
            (h, w, k.out_channels)
        )));
    }
    let out_c = k.out_channels;
    let (ph, pw) = ((k.k_h - 1) / 2, (k.k_w - 1) / 2);
    let mut grad_in = Tensor::zeros(h, w, in_c);
    let mut grad_w = vec![T::zero(); k.weights.len()];
    let mut grad_b = vec![T::zero(); out_c];
    let in_data = input.data();
    let go_data = grad_out.data();
    let gi_data = grad_in.data_mut();
    for y in 0..h {
        for x in 0..w {
            let gpx = &go_data[(y * w + x) * out_c..][..out_c];
            for (bv, &gv) in grad_b.iter_mut().zip(gpx) {
                *bv = *bv + gv;
            }
            for ky in 0..k.k_h {
                let sy = y + ky;
                if sy < ph || sy >= h + ph {
                    continue;
                }
                let iy = sy - ph;
                for kx in 0..k.k_w {
                    let sx = x + kx;
                    if sx < pw || sx >= w + pw {
                        continue;
                    }
                    let ix = sx - pw;
                    let ibase = (iy * w + ix) * in_c;
                    let wbase = ((ky * k.k_w + kx) * in_c) * out_c;
                    for ci in 0..in_c {
                        let a = in_data[ibase + ci];
                        let wrow = &k.weights[wbase + ci * out_c..][..out_c];
                        let gwrow = &mut grad_w[wbase + ci * out_c..][..out_c];
                        let mut acc = T::zero();
                        for ((&wv, gw), &gv) in wrow.iter().zip(gwrow.iter_mut()).zip(gpx) {
                            acc = acc + wv * gv;
                            *gw = *gw + a * gv;
                        }
                        gi_data[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_in, KernelGrad { weights: grad_w, bias: grad_b }))
}

/// Transposed convolution with a 2x2 kernel and stride 2: doubles the
/// spatial size. Every output pixel is written by exactly one input pixel.
pub fn transposed_conv2d<T: Real>(input: &Tensor<T>, k: KernelView<'_, T>) -> Result<Tensor<T>> {
    check_kernel_input(input, &k)?;
    if k.k_h != 2 || k.k_w != 2 {
        return Err(Error::InvalidDimension(format!(
            "transposed convolution uses a 2x2 kernel, got {}x{}",
            k.k_h, k.k_w
        )));
    }
    let (h, w, in_c) = input.shape();
    let out_c = k.out_channels;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(oh, ow, out_c);
    let in_data = input.data();
    let out_data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let ipx = &in_data[(y * w + x) * in_c..][..in_c];
            for ky in 0..2 {
                for kx in 0..2 {
                    let obase = ((2 * y + ky) * ow + (2 * x + kx)) * out_c;
                    let opx = &mut out_data[obase..obase + out_c];
                    opx.copy_from_slice(k.bias);
                    let mut wofs = ((ky * 2 + kx) * in_c) * out_c;
                    for &a in ipx {
                        let wrow = &k.weights[wofs..wofs + out_c];
                        for (ov, &wv) in opx.iter_mut().zip(wrow) {
                            *ov = *ov + a * wv;
                        }
                        wofs += out_c;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`transposed_conv2d`].
pub fn transposed_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    k: KernelView<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, KernelGrad<T>)> {
    let (h, w, in_c) = input.shape();
    if grad_out.shape() != (2 * h, 2 * w, k.out_channels) {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv backward: output gradient {:?} does not match {:?}",
            grad_out.shape(),
            (2 * h, 2 * w, k.out_channels)
        )));
    }
    let out_c = k.out_channels;
    let ow = 2 * w;
    let mut grad_in = Tensor::zeros(h, w, in_c);
    let mut grad_w = vec![T::zero(); k.weights.len()];
    let mut grad_b = vec![T::zero(); out_c];
    let in_data = input.data();
    let go_data = grad_out.data();
    let gi_data = grad_in.data_mut();
    for y in 0..h {
        for x in 0..w {
            let ibase = (y * w + x) * in_c;
            let ipx = &in_data[ibase..ibase + in_c];
            for ky in 0..2 {
                for kx in 0..2 {
                    let gbase = ((2 * y + ky) * ow + (2 * x + kx)) * out_c;
                    let gpx = &go_data[gbase..gbase + out_c];
                    for (bv, &gv) in grad_b.iter_mut().zip(gpx) {
                        *bv = *bv + gv;
                    }
                    let wbase = ((ky * 2 + kx) * in_c) * out_c;
                    for (ci, &a) in ipx.iter().enumerate() {
                        let wrow = &k.weights[wbase + ci * out_c..][..out_c];
                        let gwrow = &mut grad_w[wbase + ci * out_c..][..out_c];
                        let mut acc = T::zero();
                        for ((&wv, gw), &gv) in wrow.iter().zip(gwrow.iter_mut()).zip(gpx) {
                            acc = acc + wv * gv;
                            *gw = *gw + a * gv;
                        }
                        gi_data[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_in, KernelGrad { weights: grad_w, bias: grad_b }))
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, which of the four window positions won (for backward).
pub fn maxpool2x<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let (h, w, c) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidDimension(format!(
            "max pooling needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(oh, ow, c);
    let mut argmax = vec![0u8; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = input.get(2 * y, 2 * x, ch);
                let mut best_pos = 0u8;
                for pos in 1..4u8 {
                    let (dy, dx) = ((pos / 2) as usize, (pos % 2) as usize);
                    let v = input.get(2 * y + dy, 2 * x + dx, ch);
                    if v > best {
                        best = v;
                        best_pos = pos;
                    }
                }
                let oi = out.idx(y, x, ch);
                out.data_mut()[oi] = best;
                argmax[oi] = best_pos;
            }
        }
    }
    Ok((out, argmax))
}

/// Backward pass of [`maxpool2x`]: routes each gradient to the argmax cell.
pub fn maxpool2x_backward<T: Real>(
    input_shape: (usize, usize, usize),
    argmax: &[u8],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = input_shape;
    if grad_out.shape() != (h / 2, w / 2, c) {
        return Err(Error::ShapeMismatch(format!(
            "maxpool backward: output gradient {:?} does not match {:?}",
            grad_out.shape(),
            (h / 2, w / 2, c)
        )));
    }
    let mut grad_in = Tensor::zeros(h, w, c);
    let (oh, ow) = (h / 2, w / 2);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let oi = (y * ow + x) * c + ch;
                let pos = argmax[oi];
                let (dy, dx) = ((pos / 2) as usize, (pos % 2) as usize);
                let gi = grad_in.idx(2 * y + dy, 2 * x + dx, ch);
                grad_in.data_mut()[gi] += grad_out.data()[oi];
            }
        }
    }
    Ok(grad_in)
}

/// Nearest-neighbour upsampling by a factor of 2 in both spatial directions.
pub fn upsample_nearest2x<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = input.shape();
    Tensor::from_fn(2 * h, 2 * w, c, |y, x, ch| input.get(y / 2, x / 2, ch))
}

/// Backward pass of [`upsample_nearest2x`]: sums the four copies.
pub fn upsample_nearest2x_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (oh, ow, c) = grad_out.shape();
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::InvalidDimension(format!(
            "upsample backward needs even output dimensions, got {oh}x{ow}"
        )));
    }
    let mut grad_in = Tensor::zeros(oh / 2, ow / 2, c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let gi = grad_in.idx(y / 2, x / 2, ch);
                grad_in.data_mut()[gi] += grad_out.get(y, x, ch);
            }
        }
    }
    Ok(grad_in)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward pass of [`relu`]. The subgradient at zero is taken as zero.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.same_shape(grad_out)?;
    let mut grad_in = grad_out.clone();
    for (g, &v) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad_in)
}

/// Parametric ReLU with one learned slope per channel.
pub fn prelu<T: Real>(input: &Tensor<T>, slopes: &[T]) -> Result<Tensor<T>> {
    if slopes.len() != input.channels() {
        return Err(Error::ShapeMismatch(format!(
            "prelu needs {} slopes, got {}",
            input.channels(),
            slopes.len()
        )));
    }
    let c = input.channels();
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if *v < T::zero() {
            *v = *v * slopes[i % c];
        }
    }
    Ok(out)
}

/// Backward pass of [`prelu`]: gradients w.r.t. the input and the slopes.
pub fn prelu_backward<T: Real>(
    input: &Tensor<T>,
    slopes: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    input.same_shape(grad_out)?;
    let c = input.channels();
    let mut grad_in = grad_out.clone();
    let mut grad_slopes = vec![T::zero(); c];
    for (i, (g, &v)) in grad_in.data_mut().iter_mut().zip(input.data()).enumerate() {
        if v < T::zero() {
            grad_slopes[i % c] += *g * v;
            *g = *g * slopes[i % c];
        }
    }
    Ok((grad_in, grad_slopes))
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward pass of [`sigmoid`], expressed via the saved output.
pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.same_shape(grad_out)?;
    let mut grad_in = grad_out.clone();
    for (g, &s) in grad_in.data_mut().iter_mut().zip(output.data()) {
        *g = *g * s * (T::one() - s);
    }
    Ok(grad_in)
}

/// Channel-wise softmax: each pixel's channel vector sums to one.
pub fn softmax_channelwise<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (h, w, _) = input.shape();
    let mut out = input.clone();
    for y in 0..h {
        for x in 0..w {
            let px = out.pixel_mut(y, x);
            let mut max = px[0];
            for &v in px.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for v in px.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in px.iter_mut() {
                *v = *v / sum;
            }
        }
    }
    out
}

/// Backward pass of [`softmax_channelwise`], expressed via the saved output.
pub fn softmax_channelwise_backward<T: Real>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    output.same_shape(grad_out)?;
    let (h, w, _) = output.shape();
    let mut grad_in = grad_out.clone();
    for y in 0..h {
        for x in 0..w {
            let s = output.pixel(y, x);
            let g = grad_in.pixel_mut(y, x);
            let mut dot = T::zero();
            for (&sv, &gv) in s.iter().zip(g.iter()) {
                dot += sv * gv;
            }
            for (gv, &sv) in g.iter_mut().zip(s) {
                *gv = sv * (*gv - dot);
            }
        }
    }
    Ok(grad_in)
}

/// Per-channel statistics produced by a batch-normalisation forward pass.
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch normalisation over the spatial extent of one tensor: each channel
/// is normalised with the given mean and inverse standard deviation, then
/// scaled and shifted.
pub fn batchnorm_apply<T: Real>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    scale: &[T],
    shift: &[T],
) -> Result<Tensor<T>> {
    let c = input.channels();
    if mean.len() != c || inv_std.len() != c || scale.len() != c || shift.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm needs {c} values per statistic"
        )));
    }
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - mean[ch]) * inv_std[ch] * scale[ch] + shift[ch];
    }
    Ok(out)
}

/// Mean and (population) variance per channel over the spatial extent.
pub fn batchnorm_stats<T: Real>(input: &Tensor<T>, eps: T) -> BatchNormStats<T> {
    let (h, w, c) = input.shape();
    let n = T::of((h * w) as f64);
    let mut mean = vec![T::zero(); c];
    for (i, &v) in input.data().iter().enumerate() {
        mean[i % c] += v;
    }
    for m in mean.iter_mut() {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); c];
    for (i, &v) in input.data().iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    for v in var.iter_mut() {
        *v = *v / n;
    }
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    BatchNormStats { mean, var, inv_std }
}

/// Backward pass of batch normalisation when the statistics were computed
/// from this input (training mode): the mean and variance depend on `x`.
pub fn batchnorm_backward_train<T: Real>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    scale: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    input.same_shape(grad_out)?;
    let (h, w, c) = input.shape();
    let n = T::of((h * w) as f64);
    let mut grad_scale = vec![T::zero(); c];
    let mut grad_shift = vec![T::zero(); c];
    let mut sum_gxhat = vec![T::zero(); c];
    for (i, (&g, &x)) in grad_out.data().iter().zip(input.data()).enumerate() {
        let ch = i % c;
        let xhat = (x - mean[ch]) * inv_std[ch];
        grad_scale[ch] += g * xhat;
        grad_shift[ch] += g;
        sum_gxhat[ch] += g * xhat;
    }
    let mut grad_in = grad_out.clone();
    for (i, (g, &x)) in grad_in.data_mut().iter_mut().zip(input.data()).enumerate() {
        let ch = i % c;
        let xhat = (x - mean[ch]) * inv_std[ch];
        *g = scale[ch] * inv_std[ch] / n * (n * *g - grad_shift[ch] - xhat * sum_gxhat[ch]);
    }
    Ok((grad_in, grad_scale, grad_shift))
}

/// Backward pass of batch normalisation with fixed statistics (inference
/// mode): the transform is affine in `x`.
pub fn batchnorm_backward_eval<T: Real>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    scale: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    input.same_shape(grad_out)?;
    let c = input.channels();
    let mut grad_scale = vec![T::zero(); c];
    let mut grad_shift = vec![T::zero(); c];
    for (i, (&g, &x)) in grad_out.data().iter().zip(input.data()).enumerate() {
        let ch = i % c;
        grad_scale[ch] += g * (x - mean[ch]) * inv_std[ch];
        grad_shift[ch] += g;
    }
    let mut grad_in = grad_out.clone();
    for (i, g) in grad_in.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *g = *g * scale[ch] * inv_std[ch];
    }
    Ok((grad_in, grad_scale, grad_shift))
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat needs at least one tensor".into()));
    }
    let (h, w, _) = parts[0].shape();
    for p in parts {
        if (p.height(), p.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "concat: spatial sizes differ ({}x{} vs {}x{})",
                h,
                w,
                p.height(),
                p.width()
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Tensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let opx = out.pixel_mut(y, x);
            let mut ofs = 0;
            for p in parts {
                let ppx = p.pixel(y, x);
                opx[ofs..ofs + ppx.len()].copy_from_slice(ppx);
                ofs += ppx.len();
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`concat_channels`]: splits the gradient back apart.
pub fn concat_channels_backward<T: Real>(
    part_channels: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let total: usize = part_channels.iter().sum();
    let (h, w, c) = grad_out.shape();
    if c != total {
        return Err(Error::ShapeMismatch(format!(
            "concat backward: gradient has {c} channels, parts sum to {total}"
        )));
    }
    let mut grads: Vec<Tensor<T>> = part_channels.iter().map(|&pc| Tensor::zeros(h, w, pc)).collect();
    for y in 0..h {
        for x in 0..w {
            let gpx = grad_out.pixel(y, x);
            let mut ofs = 0;
            for (g, &pc) in grads.iter_mut().zip(part_channels) {
                g.pixel_mut(y, x).copy_from_slice(&gpx[ofs..ofs + pc]);
                ofs += pc;
            }
        }
    }
    Ok(grads)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b)?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub fn mul_elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b)?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * v;
    }
    Ok(out)
}

/// Multiplies every channel of `feat` by a single-channel spatial mask.
pub fn mul_mask<T: Real>(feat: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.channels() != 1 || (mask.height(), mask.width()) != (feat.height(), feat.width()) {
        return Err(Error::ShapeMismatch(format!(
            "mask must be {}x{}x1, got {:?}",
            feat.height(),
            feat.width(),
            mask.shape()
        )));
    }
    let c = feat.channels();
    let mut out = feat.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * mask.data()[i / c];
    }
    Ok(out)
}

pub fn scale<T: Real>(t: &Tensor<T>, factor: T) -> Tensor<T> {
    t.map(|v| v * factor)
}

pub fn sum_all<T: Real>(t: &Tensor<T>) -> T {
    t.data().iter().copied().sum()
}

/// Categorical cross-entropy between per-pixel score vectors and a one-hot
/// truth tensor, averaged over pixels. Scores are floored to avoid log(0).
pub fn cross_entropy<T: Real>(scores: &Tensor<T>, truth: &Tensor<T>, floor: T) -> Result<T> {
    scores.same_shape(truth)?;
    let (h, w, _) = scores.shape();
    let mut total = T::zero();
    for (&s, &t) in scores.data().iter().zip(truth.data()) {
        if t != T::zero() {
            let sv = if s > floor { s } else { floor };
            total = total - t * sv.ln();
        }
    }
    Ok(total / T::of((h * w) as f64))
}

/// Backward pass of [`cross_entropy`] w.r.t. the scores.
pub fn cross_entropy_backward<T: Real>(
    scores: &Tensor<T>,
    truth: &Tensor<T>,
    floor: T,
    grad_loss: T,
) -> Result<Tensor<T>> {
    scores.same_shape(truth)?;
    let (h, w, _) = scores.shape();
    let n = T::of((h * w) as f64);
    let mut grad = Tensor::zeros(scores.height(), scores.width(), scores.channels());
    for (i, (&s, &t)) in scores.data().iter().zip(truth.data()).enumerate() {
        if t != T::zero() && s > floor {
            grad.data_mut()[i] = -grad_loss * t / (s * n);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Brute-force convolution used as an oracle: walks the kernel window
    /// around each output pixel and sums products, treating out-of-frame
    /// input as zero.
    fn conv2d_naive(input: &Tensor<f64>, k: &ConvKernel<f64>) -> Tensor<f64> {
        let (h, w, in_c) = input.shape();
        let (ph, pw) = ((k.k_h as isize - 1) / 2, (k.k_w as isize - 1) / 2);
        Tensor::from_fn(h, w, k.out_channels, |y, x, co| {
            let mut acc = k.bias[co];
            for ky in 0..k.k_h {
                for kx in 0..k.k_w {
                    let iy = y as isize + ky as isize - ph;
                    let ix = x as isize + kx as isize - pw;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..in_c {
                        acc += input.get(iy as usize, ix as usize, ci)
                            * k.weights[k.weight_idx(ky, kx, ci, co)];
                    }
                }
            }
            acc
        })
    }

    fn det_tensor(h: usize, w: usize, c: usize, salt: f64) -> Tensor<f64> {
        Tensor::from_fn(h, w, c, |y, x, ch| {
            let v = (y * 31 + x * 7 + ch * 3) as f64;
            ((v + salt) * 0.773).sin()
        })
    }

    fn det_kernel(kh: usize, kw: usize, ic: usize, oc: usize, salt: f64) -> ConvKernel<f64> {
        let weights = (0..kh * kw * ic * oc)
            .map(|i| ((i as f64 + salt) * 0.311).cos() * 0.5)
            .collect();
        let bias = (0..oc).map(|i| ((i as f64 - salt) * 0.17).sin()).collect();
        ConvKernel::new(kh, kw, ic, oc, weights, bias).unwrap()
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        for &(kh, kw) in &[(1, 1), (3, 3), (5, 5), (7, 7), (5, 1)] {
            let input = det_tensor(6, 5, 3, kh as f64);
            let k = det_kernel(kh, kw, 3, 4, kw as f64);
            let fast = conv2d(&input, k.view()).unwrap();
            let slow = conv2d_naive(&input, &k);
            assert_eq!(fast.shape(), (6, 5, 4));
            for (a, b) in fast.data().iter().zip(slow.data()) {
                approx(*a, *b, 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_hand_example_3x3() {
        // Single-channel 3x3 input, identity-like kernel picking the centre,
        // checked against values computed by hand.
        let input = Tensor::new(3, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let mut k = ConvKernel::zeros(3, 3, 1, 1);
        let centre = k.weight_idx(1, 1, 0, 0);
        let above = k.weight_idx(0, 1, 0, 0);
        k.weights[centre] = 1.0;
        k.weights[above] = 1.0; // adds the pixel one row up
        let out = conv2d(&input, k.view()).unwrap();
        // out[y][x] = in[y][x] + in[y-1][x] (zero above top row)
        let expect = [1.0, 2.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0];
        for (a, b) in out.data().iter().zip(expect.iter()) {
            approx(*a, *b, 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_even_kernel() {
        let input = det_tensor(4, 4, 2, 0.0);
        let k = det_kernel(2, 2, 2, 2, 0.0);
        assert!(conv2d(&input, k.view()).is_err());
    }

    #[test]
    fn transposed_conv_matches_scatter_oracle() {
        // Oracle: out[2y+ky][2x+kx][co] = bias[co] + sum_i in[y][x][i] w[ky][kx][i][co]
        let input = det_tensor(3, 4, 3, 1.0);
        let k = det_kernel(2, 2, 3, 2, 2.0);
        let out = transposed_conv2d(&input, k.view()).unwrap();
        assert_eq!(out.shape(), (6, 8, 2));
        for y in 0..3 {
            for x in 0..4 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        for co in 0..2 {
                            let mut acc = k.bias[co];
                            for ci in 0..3 {
                                acc += input.get(y, x, ci) * k.weights[k.weight_idx(ky, kx, ci, co)];
                            }
                            approx(out.get(2 * y + ky, 2 * x + kx, co), acc, 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_dual_of_strided_conv() {
        // Duality oracle: with zero bias, <tconv(a, w), b> == <a, conv_s2(b, w')>
        // where conv_s2 is a stride-2 VALID convolution and w' swaps the
        // channel axes of w.
        let a = det_tensor(3, 3, 2, 3.0);
        let mut k = det_kernel(2, 2, 2, 4, 4.0);
        k.bias = vec![0.0; 4];
        let b = det_tensor(6, 6, 4, 5.0);

        let t = transposed_conv2d(&a, k.view()).unwrap();
        let lhs: f64 = t.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();

        // conv_s2(b, w'): output (3,3,2)
        let mut rhs = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                for ci in 0..2 {
                    let mut acc = 0.0;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            for co in 0..4 {
                                acc += b.get(2 * y + ky, 2 * x + kx, co)
                                    * k.weights[k.weight_idx(ky, kx, ci, co)];
                            }
                        }
                    }
                    rhs += acc * a.get(y, x, ci);
                }
            }
        }
        approx(lhs, rhs, 1e-10);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        let input = Tensor::new(
            2,
            4,
            1,
            vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0],
        )
        .unwrap();
        let (out, argmax) = maxpool2x(&input).unwrap();
        assert_eq!(out.shape(), (1, 2, 1));
        assert_eq!(out.data(), &[5.0, 9.0]);
        assert_eq!(argmax, vec![1, 2]); // positions: (0,1) and (1,0)
    }

    #[test]
    fn maxpool_rejects_odd_sizes() {
        assert!(maxpool2x(&Tensor::<f64>::zeros(3, 4, 1)).is_err());
        assert!(maxpool2x(&Tensor::<f64>::zeros(4, 3, 1)).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let input = Tensor::new(2, 2, 1, vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        let (_, argmax) = maxpool2x(&input).unwrap();
        let gout = Tensor::new(1, 1, 1, vec![2.5]).unwrap();
        let gin = maxpool2x_backward((2, 2, 1), &argmax, &gout).unwrap();
        assert_eq!(gin.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn upsample_repeats_pixels_and_backward_sums() {
        let input = Tensor::new(1, 2, 1, vec![3.0, 7.0]).unwrap();
        let up = upsample_nearest2x(&input);
        assert_eq!(up.shape(), (2, 4, 1));
        assert_eq!(up.data(), &[3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]);
        let gout = Tensor::new(2, 4, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let gin = upsample_nearest2x_backward(&gout).unwrap();
        assert_eq!(gin.data(), &[14.0, 22.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_matches_reference() {
        let input = Tensor::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = softmax_channelwise(&input);
        // Reference values: exp(k)/sum(exp(1..3)) evaluated in extended
        // precision: e=[2.718281828, 7.389056099, 20.085536923],
        // sum=30.192874850.
        approx(out.get(0, 0, 0), 0.09003057317038046, 1e-15);
        approx(out.get(0, 0, 1), 0.24472847105479767, 1e-15);
        approx(out.get(0, 0, 2), 0.6652409557748219, 1e-15);
        let s: f64 = out.data().iter().sum();
        approx(s, 1.0, 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let a = Tensor::new(1, 1, 3, vec![1000.0, 1001.0, 1002.0]).unwrap();
        let b = Tensor::new(1, 1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        let sa = softmax_channelwise(&a);
        let sb = softmax_channelwise(&b);
        for (x, y) in sa.data().iter().zip(sb.data()) {
            approx(*x, *y, 1e-12);
            assert!(x.is_finite());
        }
    }

    #[test]
    fn batchnorm_normalises_each_channel() {
        let input = det_tensor(4, 4, 3, 9.0);
        let eps = 1e-5;
        let stats = batchnorm_stats(&input, eps);
        let ones = vec![1.0; 3];
        let zeros = vec![0.0; 3];
        let out = batchnorm_apply(&input, &stats.mean, &stats.inv_std, &ones, &zeros).unwrap();
        // Each output channel should have mean ~0 and variance ~1 (up to eps).
        let post = batchnorm_stats(&out, 0.0);
        for ch in 0..3 {
            approx(post.mean[ch], 0.0, 1e-12);
            approx(post.var[ch], 1.0, 1e-4);
        }
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // Two pixels, three classes. Truth: class 2 then class 0.
        let scores = Tensor::new(1, 2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
        let truth = Tensor::new(1, 2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = cross_entropy(&scores, &truth, 1e-12).unwrap();
        let expect = -(0.5f64.ln() + 0.6f64.ln()) / 2.0;
        approx(loss, expect, 1e-12);
    }

    #[test]
    fn cross_entropy_floors_zero_scores() {
        let scores = Tensor::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let truth = Tensor::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let loss = cross_entropy(&scores, &truth, 1e-12).unwrap();
        approx(loss, -(1e-12f64.ln()), 1e-6);
        assert!(loss.is_finite());
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = det_tensor(3, 2, 2, 0.5);
        let b = det_tensor(3, 2, 3, 1.5);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), (3, 2, 5));
        assert_eq!(cat.pixel(1, 1)[..2], *a.pixel(1, 1));
        assert_eq!(cat.pixel(1, 1)[2..], *b.pixel(1, 1));
        let parts = concat_channels_backward(&[2, 3], &cat).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn mask_multiplication_broadcasts_over_channels() {
        let feat = det_tensor(2, 2, 3, 2.0);
        let mask = Tensor::new(2, 2, 1, vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        let out = mul_mask(&feat, &mask).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for ch in 0..3 {
                    approx(out.get(y, x, ch), feat.get(y, x, ch) * mask.get(y, x, 0), 1e-15);
                }
            }
        }
    }

    #[test]
    fn prelu_scales_negative_side_only() {
        let input = Tensor::new(1, 2, 2, vec![-2.0, 3.0, 4.0, -1.0]).unwrap();
        let out = prelu(&input, &[0.25, 0.5]).unwrap();
        assert_eq!(out.data(), &[-0.5, 3.0, 4.0, -0.5]);
    }
}
