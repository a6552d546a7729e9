//! ReLU, addition, axis reductions and batch normalization, each with its
//! backward pass.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis { axis, rank: shape.len() });
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

/// Maximum over `axis` (removed from the output shape) with the winning
/// index per output element. Ties resolve to the lowest index.
pub fn max_over_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    if n == 0 {
        return shape_err("max over empty axis");
    }
    let d = x.data();
    let mut vals = Vec::with_capacity(outer * inner);
    let mut idx = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = d[o * n * inner + i];
            let mut bi = 0;
            for k in 1..n {
                let v = d[(o * n + k) * inner + i];
                if v > best {
                    best = v;
                    bi = k;
                }
            }
            vals.push(best);
            idx.push(bi);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok((Tensor::new(shape, vals)?, idx))
}

/// Routes the gradient to the argmax position of each reduced fibre.
pub fn max_over_axis_backward<T: Scalar>(
    input_shape: &[usize],
    axis: usize,
    argmax: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(input_shape, axis)?;
    if gy.len() != outer * inner || argmax.len() != outer * inner {
        return shape_err("max_over_axis backward: gradient size mismatch");
    }
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for i in 0..inner {
            let j = o * inner + i;
            out[(o * n + argmax[j]) * inner + i] = gy.data()[j];
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Flat index of the maximum element (first on ties).
pub fn argmax<T: Scalar>(x: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in x.data().iter().enumerate() {
        if v > x.data()[best] {
            best = i;
        }
    }
    best
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values saved by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub axis: usize,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<T>,
}

/// Training-mode batch normalization: statistics per index of `axis`
/// over every other axis.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (outer, c, inner) = split_axis(x.shape(), axis)?;
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!("batchnorm over {} channels with {} / {} affine params", c, gamma.len(), beta.len()));
    }
    let m = outer * inner;
    if m < 2 {
        return Err(Error::Invalid("batchnorm training needs more than one value per channel".into()));
    }
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            mean[ch] += d[base..base + inner].iter().copied().sum::<T>();
        }
    }
    let mf = T::from_usize_lossy(m);
    mean.iter_mut().for_each(|v| *v /= mf);
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let mu = mean[ch];
            var[ch] += d[base..base + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / mf + T::lit(BN_EPS)).sqrt()).collect();
    let unbiased: Vec<T> = var.iter().map(|&v| v / T::from_usize_lossy(m - 1)).collect();
    let mut xhat = vec![T::zero(); d.len()];
    let mut y = vec![T::zero(); d.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + inner {
                let h = (d[i] - mu) * is;
                xhat[i] = h;
                y[i] = g * h + b;
            }
        }
    }
    let saved = BatchNormSaved {
        axis,
        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        batch_mean: mean,
        batch_var_unbiased: unbiased,
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, saved))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_train_backward<T: Scalar>(
    gy: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (outer, c, inner) = split_axis(gy.shape(), saved.axis)?;
    let m = T::from_usize_lossy(outer * inner);
    let g = gy.data();
    let xh = saved.xhat.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xh[i];
            }
        }
    }
    let mut gx = vec![T::zero(); g.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let k = gamma.data()[ch] * saved.inv_std[ch] / m;
            for i in base..base + inner {
                gx[i] = k * (m * g[i] - sum_g[ch] - xh[i] * sum_gx[ch]);
            }
        }
    }
    Ok((
        Tensor::new(gy.shape().to_vec(), gx)?,
        Tensor::new(vec![c], sum_gx)?,
        Tensor::new(vec![c], sum_g)?,
    ))
}

/// Evaluation-mode batch normalization with fixed running statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let (outer, c, inner) = split_axis(x.shape(), axis)?;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return shape_err(format!("batchnorm over {} channels: parameter length mismatch", c));
    }
    let mut y = x.data().to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let is = T::one() / (running_var.data()[ch] + T::lit(BN_EPS)).sqrt();
            let (mu, g, b) = (running_mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
            for v in &mut y[base..base + inner] {
                *v = g * (*v - mu) * is + b;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Returns `(grad_input, grad_gamma, grad_beta)` for [`batchnorm_eval`].
pub fn batchnorm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (outer, c, inner) = split_axis(x.shape(), axis)?;
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let is = T::one() / (running_var.data()[ch] + T::lit(BN_EPS)).sqrt();
            let mu = running_mean.data()[ch];
            for i in base..base + inner {
                let g = gy.data()[i];
                gx[i] = g * gamma.data()[ch] * is;
                gg[ch] += g * (x.data()[i] - mu) * is;
                gb[ch] += g;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(vec![c], gg)?, Tensor::new(vec![c], gb)?))
}
