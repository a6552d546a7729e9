//! 2D cross-correlation (no kernel flip) via im2col + GEMM.

use crate::error::{shape_err, Error, Result};
use crate::ops::pad::{apply_padding, padding_backward, PaddingSpec};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::Tensor;

pub(crate) fn out_size(n: usize, k: usize, stride: usize) -> Option<usize> {
    if n < k {
        None
    } else {
        Some((n - k) / stride + 1)
    }
}

struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

fn geometry(x: &[usize], k: &[usize], stride: usize) -> Result<Geometry> {
    if x.len() != 4 || k.len() != 4 {
        return shape_err(format!("conv expects 4-D input and kernel, got {:?} and {:?}", x, k));
    }
    if stride == 0 {
        return Err(Error::Invalid("stride must be positive".into()));
    }
    if x[1] != k[1] {
        return shape_err(format!("input has {} channels, kernel expects {}", x[1], k[1]));
    }
    let ho = out_size(x[2], k[2], stride);
    let wo = out_size(x[3], k[3], stride);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(Geometry {
            b: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: k[0],
            kh: k[2],
            kw: k[3],
            ho,
            wo,
            stride,
        }),
        _ => shape_err(format!("kernel {}x{} larger than input {}x{}", k[2], k[3], x[2], x[3])),
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let n = g.ho * g.wo;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * n;
                for oy in 0..g.ho {
                    let src = c * g.h * g.w + (oy * g.stride + i) * g.w + j;
                    let dst = row + oy * g.wo;
                    if g.stride == 1 {
                        cols[dst..dst + g.wo].copy_from_slice(&x[src..src + g.wo]);
                    } else {
                        for ox in 0..g.wo {
                            cols[dst + ox] = x[src + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let n = g.ho * g.wo;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * n;
                for oy in 0..g.ho {
                    let dst = c * g.h * g.w + (oy * g.stride + i) * g.w + j;
                    let src = row + oy * g.wo;
                    for ox in 0..g.wo {
                        x[dst + ox * g.stride] += cols[src + ox];
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) cross-correlation without the odd-kernel restriction.
///
/// `x: [B, C, H, W]`, `k: [O, C, kh, kw]` → `[B, O, H', W']`.
pub fn correlate_valid<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), k.shape(), stride)?;
    let n = g.ho * g.wo;
    let ck = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); g.b * g.o * n];
    let mut cols = vec![T::zero(); ck * n];
    let xs = x.data();
    for b in 0..g.b {
        im2col(&xs[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w], &g, &mut cols);
        gemm(
            T::one(),
            MatRef::row_major(k.data(), g.o, ck),
            MatRef::row_major(&cols, ck, n),
            T::zero(),
            MatMut::row_major(&mut out[b * g.o * n..(b + 1) * g.o * n], g.o, n),
        );
    }
    Tensor::new(vec![g.b, g.o, g.ho, g.wo], out)
}

/// Gradients of [`correlate_valid`] with respect to its input and kernel.
pub fn correlate_valid_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = geometry(x.shape(), k.shape(), stride)?;
    if grad_out.shape() != [g.b, g.o, g.ho, g.wo] {
        return shape_err(format!("grad_out {:?} for conv output {:?}", grad_out.shape(), [g.b, g.o, g.ho, g.wo]));
    }
    let n = g.ho * g.wo;
    let ck = g.c * g.kh * g.kw;
    let plane = g.c * g.h * g.w;
    let mut gk = vec![T::zero(); g.o * ck];
    let mut gx = if want_input { vec![T::zero(); g.b * plane] } else { Vec::new() };
    let mut cols = vec![T::zero(); ck * n];
    let mut gcols = vec![T::zero(); if want_input { ck * n } else { 0 }];
    let xs = x.data();
    let go = grad_out.data();
    for b in 0..g.b {
        let gob = &go[b * g.o * n..(b + 1) * g.o * n];
        im2col(&xs[b * plane..(b + 1) * plane], &g, &mut cols);
        gemm(
            T::one(),
            MatRef::row_major(gob, g.o, n),
            MatRef::row_major(&cols, ck, n).t(),
            T::one(),
            MatMut::row_major(&mut gk, g.o, ck),
        );
        if want_input {
            gemm(
                T::one(),
                MatRef::row_major(k.data(), g.o, ck).t(),
                MatRef::row_major(gob, g.o, n),
                T::zero(),
                MatMut::row_major(&mut gcols, ck, n),
            );
            col2im(&gcols, &g, &mut gx[b * plane..(b + 1) * plane]);
        }
    }
    let gx = if want_input { Some(Tensor::new(x.shape().to_vec(), gx)?) } else { None };
    Ok((gx, Tensor::new(k.shape().to_vec(), gk)?))
}

/// Padded, strided 2D cross-correlation.
///
/// `input: [B, C_in, H, W]`, `kernel: [C_out, C_in, kh, kw]` with odd `kh, kw`.
/// Output spatial size is `floor((H + 2p − kh) / stride) + 1`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: PaddingSpec) -> Result<Tensor<T>> {
    if kernel.rank() == 4 && (kernel.shape()[2] % 2 == 0 || kernel.shape()[3] % 2 == 0) {
        return Err(Error::EvenKernel(kernel.shape()[2], kernel.shape()[3]));
    }
    input.check_finite("conv2d input")?;
    kernel.check_finite("conv2d kernel")?;
    if input.rank() != 4 {
        return shape_err(format!("conv2d input must be 4-D, got {:?}", input.shape()));
    }
    let xp = apply_padding(input, padding)?;
    correlate_valid(&xp, kernel, stride)
}

/// Returns `(grad_input, grad_kernel)` for [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: PaddingSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xp = apply_padding(input, padding)?;
    let (gxp, gk) = correlate_valid_backward(&xp, kernel, stride, grad_out, true)?;
    let gxp = gxp.expect("input grad requested");
    let s = input.shape();
    let gx = padding_backward(&gxp, padding, s[2], s[3])?;
    Ok((gx, gk))
}
