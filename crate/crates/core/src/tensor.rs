//! Dense row-major tensors.
//!
//! Axes follow the canonical order (batch, scale, channel, height, width);
//! lower-rank tensors drop leading axes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        self.clone().reshape(shape)
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} += {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rejects NaN/Inf at an operation boundary.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// `‖self − reference‖₂ / ‖reference‖₂`.
    pub fn rel_l2(&self, reference: &Self) -> f64 {
        assert_eq!(self.shape, reference.shape, "rel_l2 shape mismatch");
        let mut num = 0.0;
        let mut den = 0.0;
        for (&a, &b) in self.data.iter().zip(&reference.data) {
            let d = a.as_f64() - b.as_f64();
            num += d * d;
            den += b.as_f64() * b.as_f64();
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    /// Copy of index `i` along axis 0.
    pub fn index0(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        Tensor { shape: self.shape[1..].to_vec(), data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::Invalid("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return shape_err(format!("stack {:?} with {:?}", first.shape, t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Crops the last two axes to `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop2d(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return shape_err("crop2d needs rank >= 2");
        }
        let (hh, ww) = (self.shape[r - 2], self.shape[r - 1]);
        if y0 + h > hh || x0 + w > ww {
            return shape_err(format!("crop {}+{} x {}+{} outside {}x{}", y0, h, x0, w, hh, ww));
        }
        let outer: usize = self.shape[..r - 2].iter().product();
        let mut data = Vec::with_capacity(outer * h * w);
        for o in 0..outer {
            let base = o * hh * ww;
            for y in 0..h {
                let row = base + (y0 + y) * ww + x0;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        let mut shape = self.shape[..r - 2].to_vec();
        shape.extend_from_slice(&[h, w]);
        Ok(Tensor { shape, data })
    }

    /// Cyclic shift of the last two axes by `(dy, dx)`: `out[y][x] = in[y-dy][x-dx]`.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Tensor<T> {
        let r = self.rank();
        let (hh, ww) = (self.shape[r - 2], self.shape[r - 1]);
        let outer: usize = self.shape[..r - 2].iter().product();
        let mut out = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            let base = o * hh * ww;
            for y in 0..hh {
                let sy = (y as isize - dy).rem_euclid(hh as isize) as usize;
                for x in 0..ww {
                    let sx = (x as isize - dx).rem_euclid(ww as isize) as usize;
                    out[base + y * ww + x] = self.data[base + sy * ww + sx];
                }
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }
}

/// A trainable tensor with its gradient and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub velocity: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { value, grad: None, velocity: None }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                if g.shape() != self.value.shape() {
                    return shape_err(format!("grad {:?} for param {:?}", g.shape(), self.value.shape()));
                }
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn from_fn_visits_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| (i[0] * 10 + i[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.at(&[1, 2]), 12.0);
    }

    #[test]
    fn roll_and_crop() {
        let t = Tensor::<f64>::from_fn(&[1, 3, 3], |i| (i[1] * 3 + i[2]) as f64);
        let r = t.roll2d(1, 0);
        assert_eq!(r.at(&[0, 0, 0]), 6.0);
        let c = t.crop2d(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert_eq!(t.check_finite("x"), Err(Error::NonFinite("x")));
    }
}
