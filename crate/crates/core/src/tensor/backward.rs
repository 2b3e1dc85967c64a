//! Reverse-mode gradients for the forward kernels in [`super::ops`].
//!
//! Each function takes the forward inputs (or outputs, where cheaper) plus
//! the upstream gradient and returns gradients for every differentiable
//! argument. These kernels only run at grad-check sizes and are serial.

use super::ops::{axis_split, conv_output_hw, kernel_dims, resize_taps, tap, Activation, ConvSpec, NormStats, NORM_EPS};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Gradients of `y = x·W + b`: `(dx, dW, db)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cin, cout) = weight.nc()?;
    if x.channels() != cin || dy.channels() != cout || x.rows() != dy.rows() {
        return Err(Error::dim(format!(
            "linear_backward: x {:?}, W {:?}, dy {:?}",
            x.shape(),
            weight.shape(),
            dy.shape()
        )));
    }
    let w = weight.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = vec![T::zero(); cin * cout];
    let mut db = vec![T::zero(); cout];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = dy.row(r);
        for (b, &g) in db.iter_mut().zip(gr) {
            *b += g;
        }
        let dxr = &mut dx.data_mut()[r * cin..(r + 1) * cin];
        for ci in 0..cin {
            let wr = &w[ci * cout..(ci + 1) * cout];
            let dwr = &mut dw[ci * cout..(ci + 1) * cout];
            let mut acc = T::zero();
            for co in 0..cout {
                acc += gr[co] * wr[co];
                dwr[co] += xr[ci] * gr[co];
            }
            dxr[ci] = acc;
        }
    }
    Ok((dx, Tensor::new([cin, cout], dw)?, Tensor::new([cout], db)?))
}

/// Gradients of [`super::ops::conv2d`]: `(dx, dkernel)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, cin) = x.hwc()?;
    let (kh, kw, _, cout) = kernel_dims(kernel)?;
    let (oh, ow) = conv_output_hw(h, w, kh, kw, spec)?;
    if dy.shape() != [oh, ow, cout] {
        return Err(Error::dim(format!(
            "conv2d_backward: dy {:?}, expected [{oh}, {ow}, {cout}]",
            dy.shape()
        )));
    }
    let (xd, kd, gd) = (x.data(), kernel.data(), dy.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let Some(iy) = tap(oy, ky, spec, h) else { continue };
                for kx in 0..kw {
                    let Some(ix) = tap(ox, kx, spec, w) else { continue };
                    let xbase = (iy * w + ix) * cin;
                    let kbase = (ky * kw + kx) * cin;
                    for ci in 0..cin {
                        let krow = (kbase + ci) * cout;
                        let xv = xd[xbase + ci];
                        let mut acc = T::zero();
                        for co in 0..cout {
                            acc += g[co] * kd[krow + co];
                            dk[krow + co] += xv * g[co];
                        }
                        dx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(kernel.shape(), dk)?))
}

/// Derivative of an activation expressed through its output `y`.
#[inline]
pub fn activation_derivative<T: Real>(act: Activation, y: T) -> T {
    match act {
        Activation::Identity => T::one(),
        Activation::Relu => {
            if y > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => y * (T::one() - y),
    }
}

/// Gradients of [`super::ops::norm_act`] given its input `x` and output `y`:
/// `(dx, dscale, dshift)`. Running statistics are not learnable.
pub fn norm_act_backward<T: Real>(
    x: &Tensor<T>,
    stats: &NormStats<'_, T>,
    act: Activation,
    y: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    x.expect_same_shape(y)?;
    y.expect_same_shape(dy)?;
    let c = x.channels();
    let eps = T::lit(NORM_EPS);
    let denom: Vec<T> = stats
        .running_var
        .data()
        .iter()
        .map(|&v| (v + eps).sqrt())
        .collect();
    let (scale, mean) = (stats.scale.data(), stats.running_mean.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for r in 0..x.rows() {
        let (xr, yr, gr) = (x.row(r), y.row(r), dy.row(r));
        let dxr = &mut dx.data_mut()[r * c..(r + 1) * c];
        for k in 0..c {
            let dz = gr[k] * activation_derivative(act, yr[k]);
            let n = (xr[k] - mean[k]) / denom[k];
            dscale[k] += dz * n;
            dshift[k] += dz;
            dxr[k] = dz * scale[k] / denom[k];
        }
    }
    Ok((dx, Tensor::new([c], dscale)?, Tensor::new([c], dshift)?))
}

/// Gradient of an elementwise activation through its output.
pub fn activation_backward<T: Real>(act: Activation, y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(dy, |yv, g| g * activation_derivative(act, yv))
}

/// Gradient of softmax along `axis`, from its output `y`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    y.expect_same_shape(dy)?;
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

/// Gradient of [`super::ops::bilinear_resize`] back onto an `in_h × in_w`
/// image.
pub fn bilinear_resize_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dy.hwc()?;
    if (h, w) == (in_h, in_w) {
        return Ok(dy.clone());
    }
    let ys = resize_taps(in_h, h);
    let xs = resize_taps(in_w, w);
    let mut dx = vec![T::zero(); in_h * in_w * c];
    let gd = dy.data();
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        let ly = T::lit(ly);
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let lx = T::lit(lx);
            let weights = [
                (y0, x0, (T::one() - ly) * (T::one() - lx)),
                (y0, x1, (T::one() - ly) * lx),
                (y1, x0, ly * (T::one() - lx)),
                (y1, x1, ly * lx),
            ];
            for k in 0..c {
                let g = gd[(oy * w + ox) * c + k];
                for &(yy, xx, wt) in &weights {
                    dx[(yy * in_w + xx) * c + k] += g * wt;
                }
            }
        }
    }
    Tensor::new([in_h, in_w, c], dx)
}
