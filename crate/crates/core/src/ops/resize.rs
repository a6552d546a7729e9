//! Separable bicubic resampling (Catmull-Rom, a = −0.5) with clamp-to-edge.
//!
//! Sample centers follow the half-pixel convention:
//! `src = (dst + 0.5) · in/out − 0.5`.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Interpolation taps for one axis.
#[derive(Clone, Debug)]
pub struct AxisPlan {
    pub len_in: usize,
    pub len_out: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl AxisPlan {
    pub fn new(len_in: usize, len_out: usize) -> Self {
        let ratio = len_in as f64 / len_out as f64;
        let last = len_in as isize - 1;
        let taps = (0..len_out)
            .map(|i| {
                let src = (i as f64 + 0.5) * ratio - 0.5;
                let base = src.floor();
                let t = src - base;
                let base = base as isize;
                let mut tap = [(0usize, 0.0); 4];
                for (k, slot) in tap.iter_mut().enumerate() {
                    let off = k as isize - 1;
                    let idx = (base + off).clamp(0, last) as usize;
                    *slot = (idx, cubic_weight(t - off as f64));
                }
                tap
            })
            .collect();
        Self { len_in, len_out, taps }
    }

    fn apply<T: Scalar>(&self, src: &[T], src_stride: usize, dst: &mut [T], dst_stride: usize) {
        for (o, tap) in self.taps.iter().enumerate() {
            let mut acc = T::zero();
            for &(i, w) in tap {
                acc += src[i * src_stride] * T::lit(w);
            }
            dst[o * dst_stride] = acc;
        }
    }

    fn apply_transpose<T: Scalar>(&self, gdst: &[T], dst_stride: usize, gsrc: &mut [T], src_stride: usize) {
        for (o, tap) in self.taps.iter().enumerate() {
            let g = gdst[o * dst_stride];
            for &(i, w) in tap {
                gsrc[i * src_stride] += g * T::lit(w);
            }
        }
    }
}

/// Resize plan for the last two axes of a tensor.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> Result<Self> {
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(Error::Invalid(format!("resize {}x{} -> {}x{}: dimension < 1", h, w, oh, ow)));
        }
        Ok(Self { rows: AxisPlan::new(h, oh), cols: AxisPlan::new(w, ow) })
    }

    fn split(&self, shape: &[usize]) -> Result<usize> {
        let r = shape.len();
        if r < 2 || shape[r - 2] != self.rows.len_in || shape[r - 1] != self.cols.len_in {
            return shape_err(format!("resize plan for {}x{} applied to {:?}", self.rows.len_in, self.cols.len_in, shape));
        }
        Ok(shape[..r - 2].iter().product())
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let outer = self.split(x.shape())?;
        let (h, w) = (self.rows.len_in, self.cols.len_in);
        let (oh, ow) = (self.rows.len_out, self.cols.len_out);
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = vec![T::zero(); outer * oh * ow];
        for o in 0..outer {
            let src = &x.data()[o * h * w..(o + 1) * h * w];
            for y in 0..h {
                self.cols.apply(&src[y * w..], 1, &mut tmp[y * ow..], 1);
            }
            let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
            for xx in 0..ow {
                self.rows.apply(&tmp[xx..], ow, &mut dst[xx..], ow);
            }
        }
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Tensor::new(shape, out)
    }

    /// Adjoint of [`ResizePlan::forward`].
    pub fn backward<T: Scalar>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let r = g.rank();
        let (h, w) = (self.rows.len_in, self.cols.len_in);
        let (oh, ow) = (self.rows.len_out, self.cols.len_out);
        if r < 2 || g.shape()[r - 2] != oh || g.shape()[r - 1] != ow {
            return shape_err(format!("resize grad {:?} for output {}x{}", g.shape(), oh, ow));
        }
        let outer: usize = g.shape()[..r - 2].iter().product();
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = vec![T::zero(); outer * h * w];
        for o in 0..outer {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            let gd = &g.data()[o * oh * ow..(o + 1) * oh * ow];
            for xx in 0..ow {
                self.rows.apply_transpose(&gd[xx..], ow, &mut tmp[xx..], ow);
            }
            let dst = &mut out[o * h * w..(o + 1) * h * w];
            for y in 0..h {
                self.cols.apply_transpose(&tmp[y * ow..], 1, &mut dst[y * w..], 1);
            }
        }
        let mut shape = g.shape().to_vec();
        shape[r - 2] = h;
        shape[r - 1] = w;
        Tensor::new(shape, out)
    }
}

/// Output size for a scale factor: `round(n · scale)`.
pub fn scaled_len(n: usize, scale: f64) -> usize {
    (n as f64 * scale).round() as usize
}

/// Resizes the last two axes by `scale` (`H'' = round(H·scale)`).
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Invalid(format!("scale must be positive, got {}", scale)));
    }
    let r = x.rank();
    if r < 2 {
        return shape_err("bicubic_resize needs rank >= 2");
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    ResizePlan::new(h, w, scaled_len(h, scale), scaled_len(w, scale))?.forward(x)
}

/// Resizes the last two axes to an explicit size.
pub fn resize_to<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return shape_err("resize_to needs rank >= 2");
    }
    ResizePlan::new(x.shape()[r - 2], x.shape()[r - 1], oh, ow)?.forward(x)
}
