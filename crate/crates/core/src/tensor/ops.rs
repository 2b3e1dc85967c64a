//! Forward kernels.
//!
//! Conventions: images are `[H, W, C]`, convolution kernels are
//! `[kh, kw, Cin, Cout]` and are applied as cross-correlation with zero
//! padding, dense weights are `[Cin, Cout]`. Every output element is computed
//! by a single thread in a fixed order, so results do not depend on how
//! rayon schedules the work.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Variance floor added inside the normalization square root.
pub const NORM_EPS: f64 = 1e-5;

/// Rows per rayon task for row-wise kernels.
const ROW_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: (kernel - 1) * dilation / 2,
        }
    }

    pub const fn strided(stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            padding: 1,
        }
    }

    /// Output extent along one axis, or `None` if the dilated kernel does
    /// not fit inside the padded input.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let effective = (kernel - 1) * self.dilation + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || kernel == 0 || effective > padded {
            return None;
        }
        Some((padded - effective) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::Relu => relu_scalar(v),
            Activation::Sigmoid => sigmoid_scalar(v),
        }
    }
}

#[inline]
pub fn relu_scalar<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(relu_scalar)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `y = x · weight + bias` applied to every row of `x` (last axis = `Cin`).
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, cout) = weight.nc()?;
    if x.channels() != cin || x.rank() == 0 {
        return Err(Error::dim(format!(
            "linear: input {:?} does not end in {cin}",
            x.shape()
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "linear: bias {:?} does not match {cout} outputs",
            bias.shape()
        )));
    }
    let rows = x.rows();
    let mut out = vec![T::zero(); rows * cout];
    let w = weight.data();
    let b = bias.data();
    out.par_chunks_mut((cout * ROW_CHUNK).max(1))
        .enumerate()
        .for_each(|(chunk, block)| {
            for (r, acc) in block.chunks_mut(cout).enumerate() {
                let xr = x.row(chunk * ROW_CHUNK + r);
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    let wr = &w[ci * cout..(ci + 1) * cout];
                    for (a, &wv) in acc.iter_mut().zip(wr) {
                        *a += xv * wv;
                    }
                }
                for (a, &bv) in acc.iter_mut().zip(b) {
                    *a += bv;
                }
            }
        });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)
}

/// 2D cross-correlation of an `[H, W, Cin]` image with a `[k, k, Cin, Cout]`
/// kernel.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let (h, w, cin) = x.hwc()?;
    let (kh, kw, kcin, cout) = kernel_dims(kernel)?;
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv2d: kernel expects {kcin} input channels, image has {cin}"
        )));
    }
    let (oh, ow) = conv_output_hw(h, w, kh, kw, spec)?;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); oh * ow * cout];
    if cout == 0 {
        return Tensor::new([oh, ow, cout], out);
    }
    out.par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(oy, orow)| {
            for ox in 0..ow {
                let acc = &mut orow[ox * cout..(ox + 1) * cout];
                for ky in 0..kh {
                    let Some(iy) = tap(oy, ky, spec, h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = tap(ox, kx, spec, w) else {
                            continue;
                        };
                        let xin = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let kbase = (ky * kw + kx) * cin;
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wr = &kd[(kbase + ci) * cout..(kbase + ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wr) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    Tensor::new([oh, ow, cout], out)
}

pub(crate) fn kernel_dims<T: Real>(kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape()[..] {
        [kh, kw, cin, cout] => Ok((kh, kw, cin, cout)),
        _ => Err(Error::dim(format!(
            "expected a [k, k, Cin, Cout] kernel, got {:?}",
            kernel.shape()
        ))),
    }
}

pub(crate) fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> Result<(usize, usize)> {
    match (spec.output_extent(h, kh), spec.output_extent(w, kw)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::dim(format!(
            "conv2d: {kh}x{kw} kernel with {spec:?} does not fit a {h}x{w} input"
        ))),
    }
}

/// Input coordinate read by output coordinate `o` at kernel tap `k`, if it
/// falls inside the unpadded input.
#[inline]
pub(crate) fn tap(o: usize, k: usize, spec: ConvSpec, extent: usize) -> Option<usize> {
    let pos = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(d[idx(k)]);
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = (d[idx(k)] - m).exp();
                d[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                d[idx(k)] /= total;
            }
        }
    }
    Ok(out)
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Per-channel inference-mode normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<'a, T> {
    pub scale: &'a Tensor<T>,
    pub shift: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
}

impl<T: Real> NormStats<'_, T> {
    fn validate(&self, channels: usize) -> Result<()> {
        for (name, t) in [
            ("scale", self.scale),
            ("shift", self.shift),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ] {
            if t.shape() != [channels] {
                return Err(Error::dim(format!(
                    "norm: {name} has shape {:?}, expected [{channels}]",
                    t.shape()
                )));
            }
        }
        if let Some(i) = self.running_var.data().iter().position(|v| !(*v > T::zero())) {
            return Err(Error::Parameter(format!(
                "norm: running variance of channel {i} is not positive"
            )));
        }
        Ok(())
    }
}

/// `act(scale · (x − mean) / sqrt(var + ε) + shift)` over the last axis.
pub fn norm_act<T: Real>(x: &Tensor<T>, stats: &NormStats<'_, T>, act: Activation) -> Result<Tensor<T>> {
    let c = x.channels();
    stats.validate(c)?;
    let eps = T::lit(NORM_EPS);
    let denom: Vec<T> = stats
        .running_var
        .data()
        .iter()
        .map(|&v| (v + eps).sqrt())
        .collect();
    let (scale, shift, mean) = (
        stats.scale.data(),
        stats.shift.data(),
        stats.running_mean.data(),
    );
    let mut out = x.clone();
    if c == 0 {
        return Ok(out);
    }
    out.data_mut().par_chunks_mut(c * ROW_CHUNK).for_each(|block| {
        for row in block.chunks_mut(c) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = act.apply(scale[k] * (*v - mean[k]) / denom[k] + shift[k]);
            }
        }
    });
    Ok(out)
}

/// Source index pair and blend weight for one output coordinate of a
/// half-pixel-centred linear resize.
pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Bilinear resize of an `[H, W, C]` image with align-corners-false sampling.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (ih, iw, c) = x.hwc()?;
    if h == 0 || w == 0 {
        return Err(Error::dim("bilinear_resize: target extents must be positive"));
    }
    if ih == 0 || iw == 0 {
        return Err(Error::dim("bilinear_resize: input image is empty"));
    }
    if (ih, iw) == (h, w) {
        return Ok(x.clone());
    }
    let ys = resize_taps(ih, h);
    let xs = resize_taps(iw, w);
    let d = x.data();
    let px = |y: usize, xx: usize, k: usize| d[(y * iw + xx) * c + k];
    let mut out = vec![T::zero(); h * w * c];
    out.par_chunks_mut((w * c).max(1))
        .enumerate()
        .for_each(|(oy, orow)| {
            let (y0, y1, ly) = ys[oy];
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::lit(lx);
                for k in 0..c {
                    let top = px(y0, x0, k) + lx * (px(y0, x1, k) - px(y0, x0, k));
                    let bottom = px(y1, x0, k) + lx * (px(y1, x1, k) - px(y1, x0, k));
                    orow[ox * c + k] = top + ly * (bottom - top);
                }
            }
        });
    Tensor::new([h, w, c], out)
}

/// Concatenates tensors along their last axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat: no inputs"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::dim(format!(
                "concat: leading shape {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let rows = first.rows();
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    let mut shape = first.shape().to_vec();
    *shape.last_mut().unwrap() = total;
    Tensor::new(shape, out)
}

/// Splits the last axis into consecutive blocks of the given widths.
pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let c = x.channels();
    if widths.iter().sum::<usize>() != c {
        return Err(Error::dim(format!(
            "split: widths {widths:?} do not sum to {c}"
        )));
    }
    let rows = x.rows();
    let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for r in 0..rows {
        let row = x.row(r);
        let mut start = 0;
        for (o, &wd) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[start..start + wd]);
            start += wd;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &wd)| {
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = wd;
            Tensor::new(shape, d)
        })
        .collect()
}
