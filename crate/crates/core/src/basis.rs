//! Multi-scale Hermite–Gaussian steerable filter dictionary.
//!
//! Each function is `H_n(u/σ) H_m(v/σ) exp(−(u² + v²)/(2σ²))` sampled on an
//! integer grid centered at the origin. Grids are stored row-major with the
//! row index running over `v` and the column index over `u`.
//!
//! Normalization: the constant for the pair `(n, m)` makes the smallest-scale
//! sample unit-ℓ2. Larger scales carry the discrete analogue of the `1/σ²`
//! factor, namely the ratio of Gaussian-envelope masses on the two grids, so
//! the zeroth moment of a kernel is the same at every scale.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest polynomial order supported by [`hermite`].
pub const MAX_ORDER: usize = 12;

/// Condition-number ceiling for the smallest-scale basis matrix.
pub const MAX_CONDITION: f64 = 1e8;

/// Physicists' Hermite polynomial via `H₀ = 1`, `H₁ = 2x`,
/// `H_{n+1} = 2x H_n − 2n H_{n−1}`.
pub fn hermite(n: usize, x: f64) -> f64 {
    debug_assert!(n <= MAX_ORDER, "hermite order {} above {}", n, MAX_ORDER);
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 2.0 * x;
    for k in 1..n {
        let next = 2.0 * x * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

fn raw_grid(n: usize, m: usize, sigma: f64, size: usize) -> Vec<f64> {
    let r = (size as isize - 1) / 2;
    let mut g = Vec::with_capacity(size * size);
    for v in -r..=r {
        for u in -r..=r {
            let (u, v) = (u as f64, v as f64);
            g.push(hermite(n, u / sigma) * hermite(m, v / sigma) * (-(u * u + v * v) / (2.0 * sigma * sigma)).exp() / (sigma * sigma));
        }
    }
    g
}

fn gaussian_mass(sigma: f64, size: usize) -> f64 {
    raw_grid(0, 0, sigma, size).iter().sum::<f64>() * sigma * sigma
}

/// One basis function on a `grid_size × grid_size` grid, scaled to unit ℓ2 norm.
pub fn sample_basis_function(n: usize, m: usize, sigma: f64, grid_size: usize) -> Result<Vec<f64>> {
    if grid_size % 2 == 0 {
        return Err(Error::EvenKernel(grid_size, grid_size));
    }
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {}", sigma)));
    }
    let mut g = raw_grid(n, m, sigma, grid_size);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Invalid(format!("function ({}, {}) vanishes on a {} grid", n, m, grid_size)));
    }
    g.iter_mut().for_each(|v| *v /= norm);
    Ok(g)
}

/// `(n, m)` pairs with `n, m < base_size`, ordered by total degree and then by `n`.
pub fn basis_pairs(base_size: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(base_size * base_size);
    for degree in 0..(2 * base_size).saturating_sub(1) {
        for n in 0..=degree {
            let m = degree - n;
            if n < base_size && m < base_size {
                pairs.push((n, m));
            }
        }
    }
    pairs
}

/// Spatial extent of the grid at scale index `k`.
pub fn grid_size_at(base_size: usize, k: usize) -> usize {
    if k == 0 || base_size == 1 {
        base_size
    } else {
        base_size + 2
    }
}

/// Fixed multi-scale dictionary with the smallest-scale inverse.
#[derive(Clone, Debug)]
pub struct ScaleBasis<T> {
    base_size: usize,
    step: f64,
    scales: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    grid_sizes: Vec<usize>,
    /// Per scale: `[N, size·size]`.
    functions: Vec<Tensor<T>>,
    /// `[N, base·base]`, the inverse of the smallest-scale matrix.
    inverse: Tensor<T>,
    condition: f64,
}

#[derive(Serialize)]
struct BasisDump<'a> {
    base_size: usize,
    scale_step: f64,
    scales: &'a [f64],
    pairs: &'a [(usize, usize)],
    grid_sizes: &'a [usize],
    num_functions: usize,
    condition_number: f64,
}

impl<T: Scalar> ScaleBasis<T> {
    /// Samples the dictionary at scales `step⁰, step¹, …` and inverts the
    /// smallest-scale matrix.
    pub fn build(base_size: usize, step: f64, num_scales: usize) -> Result<Self> {
        if base_size % 2 == 0 || base_size == 0 {
            return Err(Error::EvenKernel(base_size, base_size));
        }
        if num_scales == 0 {
            return Err(Error::Invalid("at least one scale is required".into()));
        }
        if num_scales > 1 && !(step > 1.0) {
            return Err(Error::Invalid(format!("scale step must exceed 1, got {}", step)));
        }
        if base_size > MAX_ORDER + 1 {
            return Err(Error::Invalid(format!("base size {} needs Hermite order above {}", base_size, MAX_ORDER)));
        }
        let pairs = basis_pairs(base_size);
        let n_fun = pairs.len();
        let scales: Vec<f64> = (0..num_scales).map(|k| step.powi(k as i32)).collect();
        let grid_sizes: Vec<usize> = (0..num_scales).map(|k| grid_size_at(base_size, k)).collect();

        let norms: Vec<f64> = pairs
            .iter()
            .map(|&(n, m)| raw_grid(n, m, scales[0], base_size).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mass0 = gaussian_mass(scales[0], base_size);

        let mut functions = Vec::with_capacity(num_scales);
        let mut smallest = Vec::new();
        for (k, (&sigma, &size)) in scales.iter().zip(&grid_sizes).enumerate() {
            let ratio = mass0 / gaussian_mass(sigma, size) * sigma * sigma;
            let mut data = Vec::with_capacity(n_fun * size * size);
            for (&(n, m), &norm) in pairs.iter().zip(&norms) {
                data.extend(raw_grid(n, m, sigma, size).into_iter().map(|v| v * ratio / norm));
            }
            if k == 0 {
                smallest = data.clone();
            }
            functions.push(Tensor::new(vec![n_fun, size * size], data.into_iter().map(T::lit).collect())?);
        }

        // columns are functions, rows are pixels
        let p = base_size * base_size;
        let mat = DMatrix::from_fn(p, n_fun, |r, c| smallest[c * p + r]);
        let sv = mat.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularBasis(condition));
        }
        let inv = mat.try_inverse().ok_or(Error::SingularBasis(condition))?;
        let inverse = Tensor::from_fn(&[n_fun, p], |i| T::lit(inv[(i[0], i[1])]));

        Ok(Self { base_size, step, scales, pairs, grid_sizes, functions, inverse, condition })
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn num_functions(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn grid_size(&self, k: usize) -> usize {
        self.grid_sizes[k]
    }

    pub fn grid_sizes(&self) -> &[usize] {
        &self.grid_sizes
    }

    /// Largest grid extent over all scales.
    pub fn max_grid_size(&self) -> usize {
        self.grid_sizes.iter().copied().max().unwrap_or(self.base_size)
    }

    /// `[N, size·size]` samples at scale index `k`.
    pub fn functions(&self, k: usize) -> &Tensor<T> {
        &self.functions[k]
    }

    /// Function `i` at scale index `k` as a `[size, size]` grid.
    pub fn function(&self, k: usize, i: usize) -> Tensor<T> {
        let s = self.grid_sizes[k];
        self.functions[k].index0(i).reshape(&[s, s]).expect("grid shape")
    }

    /// `[N, base·base]` inverse of the smallest-scale basis matrix.
    pub fn inverse(&self) -> &Tensor<T> {
        &self.inverse
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// Coefficients `w = Ψ₁⁻¹ κ′` reproducing a `base × base` kernel at the
    /// smallest scale.
    pub fn solve_coefficients(&self, kernel: &[T]) -> Result<Vec<T>> {
        let p = self.base_size * self.base_size;
        if kernel.len() != p {
            return Err(Error::Shape(format!("kernel has {} pixels, basis expects {}", kernel.len(), p)));
        }
        let inv = self.inverse.data();
        Ok((0..self.num_functions()).map(|i| (0..p).map(|j| inv[i * p + j] * kernel[j]).sum()).collect())
    }

    /// `Σᵢ wᵢ ψ_{k,i}` as a flat grid at scale index `k`.
    pub fn synthesize(&self, k: usize, coeffs: &[T]) -> Vec<T> {
        let f = &self.functions[k];
        let p = f.shape()[1];
        let mut out = vec![T::zero(); p];
        for (i, &w) in coeffs.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&f.data()[i * p..(i + 1) * p]) {
                *o += w * v;
            }
        }
        out
    }

    /// Structured text dump: scales, pairs, grid sizes, condition number.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(&BasisDump {
            base_size: self.base_size,
            scale_step: self.step,
            scales: &self.scales,
            pairs: &self.pairs,
            grid_sizes: &self.grid_sizes,
            num_functions: self.pairs.len(),
            condition_number: self.condition,
        })
        .expect("basis dump serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::resize::resize_to;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hermite_values() {
        assert_eq!(hermite(0, 123.0), 1.0);
        assert_eq!(hermite(1, 2.0), 4.0);
        assert_eq!(hermite(2, 1.0), 2.0);
        // H3(x) = 8x³ − 12x
        assert_eq!(hermite(3, 0.5), 8.0 * 0.125 - 6.0);
    }

    #[test]
    fn gaussian_center_value() {
        let g = sample_basis_function(0, 0, 1.0, 3).unwrap();
        let norm = (1.0 + 4.0 * (-1.0f64).exp() + 4.0 * (-2.0f64).exp()).sqrt();
        assert!((g[4] - 1.0 / norm).abs() < 1e-12);
        assert!((g[4] - 0.5761).abs() < 1e-4);
    }

    #[test]
    fn symmetries() {
        let odd = sample_basis_function(1, 0, 1.3, 5).unwrap();
        let even = sample_basis_function(0, 0, 1.3, 5).unwrap();
        for v in 0..5 {
            for u in 0..5 {
                assert!((odd[v * 5 + u] + odd[v * 5 + (4 - u)]).abs() < 1e-12);
                assert!((even[v * 5 + u] - even[u * 5 + v]).abs() < 1e-12);
                assert!((even[v * 5 + u] - even[(4 - v) * 5 + (4 - u)]).abs() < 1e-12);
            }
        }
        assert!(sample_basis_function(0, 0, 1.0, 4).is_err());
    }

    #[test]
    fn pair_order_for_three() {
        let p = basis_pairs(3);
        assert_eq!(p, vec![(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(basis_pairs(7).len(), 49);
    }

    #[test]
    fn grid_sizes_follow_base_plus_two() {
        let b = ScaleBasis::<f64>::build(7, 2f64.sqrt(), 3).unwrap();
        assert_eq!(b.grid_sizes(), &[7, 9, 9]);
        assert_eq!(b.num_functions(), 49);
        let one = ScaleBasis::<f64>::build(1, 2f64.sqrt(), 3).unwrap();
        assert_eq!(one.grid_sizes(), &[1, 1, 1]);
    }

    #[test]
    fn smallest_scale_is_unit_norm() {
        for base in [1, 3, 5, 7] {
            let b = ScaleBasis::<f64>::build(base, 1.5, 2).unwrap();
            for i in 0..b.num_functions() {
                assert!((b.function(0, i).norm() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_mass_matches_across_scales() {
        let b = ScaleBasis::<f64>::build(3, 2f64.sqrt(), 3).unwrap();
        let s0 = b.function(0, 0).sum();
        for k in 1..3 {
            assert!((b.function(k, 0).sum() - s0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_scale_is_complete() {
        let b = ScaleBasis::<f64>::build(5, 2.0, 1).unwrap();
        assert_eq!(b.num_scales(), 1);
        assert!(b.condition_number().is_finite());
    }

    #[test]
    fn round_trip_reconstructs_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for base in [3, 5, 7] {
            let b = ScaleBasis::<f64>::build(base, 2f64.sqrt(), 3).unwrap();
            let k = Tensor::<f64>::randn(&[base * base], 1.0, &mut rng);
            let w = b.solve_coefficients(k.data()).unwrap();
            let back = Tensor::new(vec![base * base], b.synthesize(0, &w)).unwrap();
            assert!(back.rel_l2(&k) <= 1e-5);
        }
    }

    #[test]
    fn unit_kernel_gives_unit_coefficients() {
        let b = ScaleBasis::<f64>::build(3, 2f64.sqrt(), 2).unwrap();
        let w = b.solve_coefficients(b.function(0, 4).data()).unwrap();
        for (i, v) in w.iter().enumerate() {
            let want = if i == 4 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn functions_are_approximately_scale_covariant() {
        // Upscaling the σ-sample by a ≈ sampling at a·σ, for low orders.
        let a = 2f64.sqrt();
        let sigma = 2.0;
        // 29·√2 ≈ 41.01, so both grids stay centered
        let size = 29;
        let big = 41;
        for &(n, m) in &[(0usize, 0usize), (1, 0), (0, 1), (1, 1), (2, 0)] {
            let small = Tensor::new(vec![size, size], sample_basis_function(n, m, sigma, size).unwrap()).unwrap();
            let up = resize_to(&small, big, big).unwrap();
            let direct = Tensor::new(vec![big, big], sample_basis_function(n, m, sigma * a, big).unwrap()).unwrap();
            let c = 4;
            let up_i = up.crop2d(c, c, big - 2 * c, big - 2 * c).unwrap();
            let di_i = direct.crop2d(c, c, big - 2 * c, big - 2 * c).unwrap();
            let up_n = up_i.scale(1.0 / up_i.norm());
            let di_n = di_i.scale(1.0 / di_i.norm());
            let err = up_n.rel_l2(&di_n);
            assert!(err <= 5e-2, "({}, {}): {}", n, m, err);
        }
    }

    #[test]
    fn dump_lists_everything() {
        let b = ScaleBasis::<f32>::build(3, 2f64.sqrt(), 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&b.dump()).unwrap();
        assert_eq!(v["grid_sizes"], serde_json::json!([3, 5, 5]));
        assert_eq!(v["pairs"][1], serde_json::json!([0, 1]));
        assert!(v["condition_number"].as_f64().unwrap() < MAX_CONDITION);
    }
}
