//! Scale-equivariant layers: parametric scale-convolution, the fast 1×1
//! scale-convolution and scale-pooling.
//!
//! Scale feature maps have axes `[B, S, C, H, W]`; scale index `k`
//! corresponds to `σ = step^k`. Inter-scale offset `j` reads scale `k + j`;
//! offsets past the top of the scale axis contribute nothing.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::ScaleBasis;
use crate::error::{shape_err, Error, Result};
use crate::ops::conv::{conv2d, conv2d_backward};
use crate::ops::elementwise::{max_over_axis, max_over_axis_backward};
use crate::ops::pad::{PadMode, PaddingSpec};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::{Param, Tensor};

/// Padding policy of a layer: wrap while training, zero-fill at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    /// No padding at all.
    Valid,
    /// Circular in training, zero in evaluation, sized to keep `H/stride`.
    Same,
    /// Same-sized circular padding in both modes.
    Circular,
    /// Same-sized zero padding in both modes.
    Zero,
}

impl PaddingPolicy {
    pub fn spec(self, kernel_extent: usize, training: bool) -> PaddingSpec {
        match self {
            PaddingPolicy::Valid => PaddingSpec::NONE,
            PaddingPolicy::Same => PaddingSpec {
                mode: if training { PadMode::Circular } else { PadMode::Zero },
                amount: (kernel_extent - 1) / 2,
            },
            PaddingPolicy::Circular => PaddingSpec::circular((kernel_extent - 1) / 2),
            PaddingPolicy::Zero => PaddingSpec::zero((kernel_extent - 1) / 2),
        }
    }
}

pub(crate) fn dims5(shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    if shape.len() != 5 {
        return shape_err(format!("scale feature map must be 5-D [B,S,C,H,W], got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2], shape[3], shape[4]))
}

fn check_weights<T: Scalar>(weights: &Tensor<T>, basis: &ScaleBasis<T>) -> Result<(usize, usize, usize, usize)> {
    let s = weights.shape();
    if s.len() != 4 {
        return shape_err(format!("scale-conv weights must be [C_out, C_in, I, N], got {:?}", s));
    }
    if s[3] != basis.num_functions() {
        return shape_err(format!("weights carry {} coefficients, basis has {} functions", s[3], basis.num_functions()));
    }
    if s[2] == 0 || s[2] > basis.num_scales() {
        return shape_err(format!("inter-scale extent {} must be in 1..={}", s[2], basis.num_scales()));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// `(o, c, j, n)` → `(o, j, c, n)` restricted to `j < jv`.
fn permute_ocj<T: Scalar>(w: &[T], o: usize, c: usize, i: usize, n: usize, jv: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(o * jv * c * n);
    for oo in 0..o {
        for j in 0..jv {
            for cc in 0..c {
                let src = ((oo * c + cc) * i + j) * n;
                out.extend_from_slice(&w[src..src + n]);
            }
        }
    }
    out
}

/// Synthesized kernels per scale, each `[C_out, C_in, I, K_k, K_k]` where
/// `K_k` is the basis grid extent at scale `k`. Linear in the weights.
pub fn synthesize_kernels<T: Scalar>(weights: &Tensor<T>, basis: &ScaleBasis<T>) -> Result<Vec<Tensor<T>>> {
    let (o, c, i, n) = check_weights(weights, basis)?;
    weights.check_finite("scale-conv weights")?;
    (0..basis.num_scales())
        .map(|k| {
            let f = basis.functions(k);
            let p = f.shape()[1];
            let rows = o * c * i;
            let mut out = vec![T::zero(); rows * p];
            gemm(
                T::one(),
                MatRef::row_major(weights.data(), rows, n),
                MatRef::row_major(f.data(), n, p),
                T::zero(),
                MatMut::row_major(&mut out, rows, p),
            );
            let ks = basis.grid_size(k);
            Tensor::new(vec![o, c, i, ks, ks], out)
        })
        .collect()
}

/// Conv-layout kernel `[C_out, jv·C_in, K, K]` at scale `k`, zero-embedded to
/// extent `kmax`. Input-channel index is `j·C_in + c`.
fn conv_kernel<T: Scalar>(weights: &Tensor<T>, basis: &ScaleBasis<T>, k: usize, jv: usize, kmax: usize) -> Tensor<T> {
    let s = weights.shape();
    let (o, c, i, n) = (s[0], s[1], s[2], s[3]);
    let wp = permute_ocj(weights.data(), o, c, i, n, jv);
    let f = basis.functions(k);
    let p = f.shape()[1];
    let rows = o * jv * c;
    let mut native = vec![T::zero(); rows * p];
    gemm(
        T::one(),
        MatRef::row_major(&wp, rows, n),
        MatRef::row_major(f.data(), n, p),
        T::zero(),
        MatMut::row_major(&mut native, rows, p),
    );
    let ks = basis.grid_size(k);
    let t = Tensor::new(vec![o, jv * c, ks, ks], native).expect("kernel shape");
    embed_kernel(&t, kmax)
}

fn embed_kernel<T: Scalar>(k: &Tensor<T>, kmax: usize) -> Tensor<T> {
    let s = k.shape();
    let ks = s[2];
    if ks == kmax {
        return k.clone();
    }
    let off = (kmax - ks) / 2;
    let outer = s[0] * s[1];
    let mut out = vec![T::zero(); outer * kmax * kmax];
    for q in 0..outer {
        for y in 0..ks {
            let src = (q * ks + y) * ks;
            let dst = (q * kmax + y + off) * kmax + off;
            out[dst..dst + ks].copy_from_slice(&k.data()[src..src + ks]);
        }
    }
    Tensor::new(vec![s[0], s[1], kmax, kmax], out).expect("embedded kernel shape")
}

fn unembed_kernel<T: Scalar>(g: &Tensor<T>, ks: usize) -> Vec<T> {
    let s = g.shape();
    let kmax = s[2];
    let off = (kmax - ks) / 2;
    let outer = s[0] * s[1];
    let mut out = Vec::with_capacity(outer * ks * ks);
    for q in 0..outer {
        for y in 0..ks {
            let src = (q * kmax + y + off) * kmax + off;
            out.extend_from_slice(&g.data()[src..src + ks]);
        }
    }
    out
}

/// Input slices `k, k+1, …, k+jv−1` concatenated along channels: `[B, jv·C, H, W]`.
fn gather_scales<T: Scalar>(x: &Tensor<T>, k: usize, jv: usize) -> Tensor<T> {
    let (b, s, c, h, w) = dims5(x.shape()).expect("5-D input");
    let plane = c * h * w;
    let mut out = Vec::with_capacity(b * jv * plane);
    for bb in 0..b {
        for j in 0..jv {
            let src = (bb * s + k + j) * plane;
            out.extend_from_slice(&x.data()[src..src + plane]);
        }
    }
    Tensor::new(vec![b, jv * c, h, w], out).expect("gathered shape")
}

fn valid_offsets(k: usize, interscale: usize, s_in: usize) -> usize {
    if s_in == 1 {
        1
    } else {
        interscale.min(s_in - k)
    }
}

fn validate_input<T: Scalar>(x: &Tensor<T>, basis: &ScaleBasis<T>, interscale: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, s, c, h, w) = dims5(x.shape())?;
    if s != 1 && s != basis.num_scales() {
        return shape_err(format!("input has {} scales, basis has {}", s, basis.num_scales()));
    }
    if s == 1 && interscale != 1 && basis.num_scales() > 1 {
        return Err(Error::Invalid("a lifting layer (single input scale) needs inter-scale extent 1".into()));
    }
    Ok((b, s, c, h, w))
}

/// Parametric scale-convolution.
///
/// `input: [B, S_in, C_in, H, W]` with `S_in ∈ {1, S}`; `weights:
/// [C_out, C_in, I, N]`. Output slice `k` is
/// `Σ_{j<I} conv2d(input[k+j], κ_k[:, :, j])`; a single-scale input is lifted
/// (slice `k` is `conv2d(input, κ_k)`). Kernels are zero-embedded to the
/// largest grid extent so every slice shares one spatial layout.
pub fn scale_conv<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    basis: &ScaleBasis<T>,
    stride: usize,
    padding: PaddingSpec,
) -> Result<Tensor<T>> {
    let (_, _, _, i, _) = {
        let (o, c, i, n) = check_weights(weights, basis)?;
        (o, c, 0, i, n)
    };
    let (b, s_in, c, _, _) = validate_input(input, basis, i)?;
    if c != weights.shape()[1] {
        return shape_err(format!("input has {} channels, weights expect {}", c, weights.shape()[1]));
    }
    input.check_finite("scale_conv input")?;
    weights.check_finite("scale_conv weights")?;
    let kmax = basis.max_grid_size();
    let ns = basis.num_scales();
    let mut slices = Vec::with_capacity(ns);
    for k in 0..ns {
        let jv = valid_offsets(k, i, s_in);
        let src_k = if s_in == 1 { 0 } else { k };
        let xk = gather_scales(input, src_k, jv);
        let kk = conv_kernel(weights, basis, k, jv, kmax);
        slices.push(conv2d(&xk, &kk, stride, padding)?);
    }
    interleave_scales(&slices, b)
}

/// `[B, C, H, W]` per scale → `[B, S, C, H, W]`.
pub(crate) fn interleave_scales<T: Scalar>(slices: &[Tensor<T>], b: usize) -> Result<Tensor<T>> {
    let s0 = slices[0].shape().to_vec();
    let plane: usize = s0[1..].iter().product();
    let mut out = Vec::with_capacity(b * slices.len() * plane);
    for bb in 0..b {
        for sl in slices {
            out.extend_from_slice(&sl.data()[bb * plane..(bb + 1) * plane]);
        }
    }
    let mut shape = vec![b, slices.len()];
    shape.extend_from_slice(&s0[1..]);
    Tensor::new(shape, out)
}

/// Slice `k` of a `[B, S, …]` tensor as `[B, …]`.
pub fn scale_slice<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = x.shape();
    let plane: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(s[0] * plane);
    for bb in 0..s[0] {
        let src = (bb * s[1] + k) * plane;
        out.extend_from_slice(&x.data()[src..src + plane]);
    }
    let mut shape = vec![s[0]];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(shape, out).expect("slice shape")
}

/// Returns `(grad_input, grad_weights)` for [`scale_conv`].
pub fn scale_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    basis: &ScaleBasis<T>,
    stride: usize,
    padding: PaddingSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (o, c, i, n) = check_weights(weights, basis)?;
    let (b, s_in, _, h, w) = validate_input(input, basis, i)?;
    let ns = basis.num_scales();
    let kmax = basis.max_grid_size();
    let (gb, gs, gc, _, _) = dims5(grad_out.shape())?;
    if gb != b || gs != ns || gc != o {
        return shape_err(format!("grad_out {:?} does not match scale_conv output", grad_out.shape()));
    }
    let plane = c * h * w;
    let mut gin = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weights.len()];
    for k in 0..ns {
        let jv = valid_offsets(k, i, s_in);
        let src_k = if s_in == 1 { 0 } else { k };
        let xk = gather_scales(input, src_k, jv);
        let kk = conv_kernel(weights, basis, k, jv, kmax);
        let gk_out = scale_slice(grad_out, k);
        let (gx, gkern) = conv2d_backward(&xk, &kk, stride, padding, &gk_out)?;
        for bb in 0..b {
            for j in 0..jv {
                let dst = (bb * s_in + src_k + j) * plane;
                let src = (bb * jv + j) * plane;
                for (d, &g) in gin[dst..dst + plane].iter_mut().zip(&gx.data()[src..src + plane]) {
                    *d += g;
                }
            }
        }
        // back through the embedding and the basis synthesis
        let ks = basis.grid_size(k);
        let native = unembed_kernel(&gkern, ks);
        let f = basis.functions(k);
        let p = ks * ks;
        let rows = o * jv * c;
        let mut gwp = vec![T::zero(); rows * n];
        gemm(
            T::one(),
            MatRef::row_major(&native, rows, p),
            MatRef::row_major(f.data(), n, p).t(),
            T::zero(),
            MatMut::row_major(&mut gwp, rows, n),
        );
        for oo in 0..o {
            for j in 0..jv {
                for cc in 0..c {
                    let src = ((oo * jv + j) * c + cc) * n;
                    let dst = ((oo * c + cc) * i + j) * n;
                    for q in 0..n {
                        gw[dst + q] += gwp[src + q];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), gin)?, Tensor::new(weights.shape().to_vec(), gw)?))
}

/// Fast 1×1 scale-convolution: a channel mix along a depth-`I` scale window,
/// `out[b,k,o] = Σ_{c,j} w[o,c,j] · in[b,k+j,c]`, with no basis involved.
pub fn fast_scale_conv_1x1<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, s, c, h, w) = dims5(input.shape())?;
    let ws = weights.shape();
    if ws.len() != 3 || ws[1] != c {
        return shape_err(format!("1x1 weights {:?} for {} input channels", ws, c));
    }
    let (o, i) = (ws[0], ws[2]);
    if i == 0 || i > s {
        return Err(Error::Invalid(format!("inter-scale extent {} exceeds {} scales", i, s)));
    }
    input.check_finite("fast_scale_conv_1x1 input")?;
    let hw = h * w;
    let mut out = vec![T::zero(); b * s * o * hw];
    for bb in 0..b {
        for k in 0..s {
            let dst = &mut out[(bb * s + k) * o * hw..(bb * s + k + 1) * o * hw];
            for j in 0..i.min(s - k) {
                let src = (bb * s + k + j) * c * hw;
                gemm(
                    T::one(),
                    MatRef { data: &weights.data()[j..], rows: o, cols: c, row_stride: c * i, col_stride: i },
                    MatRef::row_major(&input.data()[src..src + c * hw], c, hw),
                    T::one(),
                    MatMut::row_major(dst, o, hw),
                );
            }
        }
    }
    Tensor::new(vec![b, s, o, h, w], out)
}

/// Returns `(grad_input, grad_weights)` for [`fast_scale_conv_1x1`].
pub fn fast_scale_conv_1x1_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, s, c, h, w) = dims5(input.shape())?;
    let (o, i) = (weights.shape()[0], weights.shape()[2]);
    if grad_out.shape() != [b, s, o, h, w] {
        return shape_err(format!("grad_out {:?} for 1x1 output {:?}", grad_out.shape(), [b, s, o, h, w]));
    }
    let hw = h * w;
    let mut gin = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weights.len()];
    for bb in 0..b {
        for k in 0..s {
            let go = &grad_out.data()[(bb * s + k) * o * hw..(bb * s + k + 1) * o * hw];
            for j in 0..i.min(s - k) {
                let src = (bb * s + k + j) * c * hw;
                gemm(
                    T::one(),
                    MatRef::row_major(go, o, hw),
                    MatRef::row_major(&input.data()[src..src + c * hw], c, hw).t(),
                    T::one(),
                    MatMut { data: &mut gw[j..], rows: o, cols: c, row_stride: c * i, col_stride: i },
                );
                gemm(
                    T::one(),
                    MatRef { data: &weights.data()[j..], rows: o, cols: c, row_stride: c * i, col_stride: i }.t(),
                    MatRef::row_major(go, o, hw),
                    T::one(),
                    MatMut::row_major(&mut gin[src..src + c * hw], c, hw),
                );
            }
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), gin)?, Tensor::new(weights.shape().to_vec(), gw)?))
}

/// Global max over the scale axis: `[B, S, C, H, W]` → `[B, C, H, W]`,
/// with the winning scale per element (ties to the lowest index).
pub fn scale_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    dims5(input.shape())?;
    max_over_axis(input, 1)
}

pub fn scale_pool_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    max_over_axis_backward(input_shape, 1, argmax, grad_out)
}

/// A scale-convolution layer bound to a fixed basis.
#[derive(Clone, Debug)]
pub struct ScaleConvLayer<T> {
    pub weight: Param<T>,
    pub basis: Arc<ScaleBasis<T>>,
    pub stride: usize,
    pub padding: PaddingPolicy,
}

impl<T: Scalar> ScaleConvLayer<T> {
    pub fn zeros(c_out: usize, c_in: usize, interscale: usize, basis: Arc<ScaleBasis<T>>, stride: usize, padding: PaddingPolicy) -> Self {
        let n = basis.num_functions();
        Self { weight: Param::new(Tensor::zeros(&[c_out, c_in, interscale, n])), basis, stride, padding }
    }

    /// He-style initialization of the coefficients.
    pub fn random<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        interscale: usize,
        basis: Arc<ScaleBasis<T>>,
        stride: usize,
        padding: PaddingPolicy,
        rng: &mut R,
    ) -> Self {
        let n = basis.num_functions();
        let fan_in = (c_in * interscale * basis.base_size() * basis.base_size()) as f64;
        let w = Tensor::randn(&[c_out, c_in, interscale, n], (2.0 / fan_in).sqrt(), rng);
        Self { weight: Param::new(w), basis, stride, padding }
    }

    pub fn interscale(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn padding_spec(&self, training: bool) -> PaddingSpec {
        self.padding.spec(self.basis.max_grid_size(), training)
    }

    pub fn kernels(&self) -> Result<Vec<Tensor<T>>> {
        synthesize_kernels(&self.weight.value, &self.basis)
    }

    pub fn forward(&self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        scale_conv(input, &self.weight.value, &self.basis, self.stride, self.padding_spec(training))
    }
}
