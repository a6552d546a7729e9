//! Non-parametric scale-convolution between a search embedding `f1` and a
//! template embedding `f2`:
//! `h(s, ·) = L_{1/s}[L_s[f1] ★ f2]`, stacked over the requested scales.

use crate::error::{shape_err, Error, Result};
use crate::ops::conv::{correlate_valid, correlate_valid_backward};
use crate::ops::elementwise::{max_over_axis, max_over_axis_backward};
use crate::ops::resize::{scaled_len, ResizePlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of one scale slice.
#[derive(Clone, Debug)]
struct SlicePlan {
    scale: f64,
    up: Option<ResizePlan>,
    corr: (usize, usize),
    down: Option<ResizePlan>,
    fitted: (usize, usize),
}

/// Resampling plan for a fixed pair of input geometries.
#[derive(Clone, Debug)]
pub struct XcorrPlan {
    slices: Vec<SlicePlan>,
    /// Common output extent (the `s = 1` correlation size).
    pub out: (usize, usize),
    batch: usize,
    template_batch: usize,
    channels: usize,
    search: (usize, usize),
    template: (usize, usize),
}

/// `[B, C, H, W]` or `[B, S, C, H, W]` (scale axis folded into channels).
fn as_4d<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    let s = x.shape();
    match s.len() {
        4 => Ok(x.clone()),
        5 => x.reshaped(&[s[0], s[1] * s[2], s[3], s[4]]),
        _ => shape_err(format!("{} must be 4-D or 5-D, got {:?}", what, s)),
    }
}

impl XcorrPlan {
    pub fn new(search_shape: &[usize], template_shape: &[usize], scales: &[f64]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Invalid("scale set is empty".into()));
        }
        let fold = |s: &[usize]| -> Result<[usize; 4]> {
            match s.len() {
                4 => Ok([s[0], s[1], s[2], s[3]]),
                5 => Ok([s[0], s[1] * s[2], s[3], s[4]]),
                _ => shape_err(format!("embedding must be 4-D or 5-D, got {:?}", s)),
            }
        };
        let [b, c, h, w] = fold(search_shape)?;
        let [tb, tc, th, tw] = fold(template_shape)?;
        if tc != c || (tb != b && tb != 1) {
            return shape_err(format!("template {:?} incompatible with search {:?}", template_shape, search_shape));
        }
        if th > h || tw > w {
            return Err(Error::Invalid(format!("template {}x{} larger than search {}x{}", th, tw, h, w)));
        }
        let out = (h - th + 1, w - tw + 1);
        let mut slices = Vec::with_capacity(scales.len());
        for &s in scales {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Invalid(format!("scale must be positive, got {}", s)));
            }
            let unit = (s - 1.0).abs() < 1e-12;
            let (uh, uw) = if unit { (h, w) } else { (scaled_len(h, s), scaled_len(w, s)) };
            if th > uh || tw > uw {
                return Err(Error::Invalid(format!(
                    "template {}x{} larger than search rescaled by {} ({}x{})",
                    th, tw, s, uh, uw
                )));
            }
            let corr = (uh - th + 1, uw - tw + 1);
            let fitted = if unit { corr } else { (scaled_len(corr.0, 1.0 / s).max(1), scaled_len(corr.1, 1.0 / s).max(1)) };
            slices.push(SlicePlan {
                scale: s,
                up: if unit { None } else { Some(ResizePlan::new(h, w, uh, uw)?) },
                corr,
                down: if unit { None } else { Some(ResizePlan::new(corr.0, corr.1, fitted.0, fitted.1)?) },
                fitted,
            });
        }
        Ok(Self { slices, out, batch: b, template_batch: tb, channels: c, search: (h, w), template: (th, tw) })
    }

    pub fn scales(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.scale).collect()
    }

    /// `[B, 1, H, W]` per-sample correlation of `x` with `k` (template batch may broadcast).
    fn correlate<T: Scalar>(&self, x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = Vec::with_capacity(self.batch);
        for b in 0..self.batch {
            let xb = x.index0(b).reshape(&prepend(x.shape()))?;
            let kb = k.index0(if self.template_batch == 1 { 0 } else { b }).reshape(&prepend(k.shape()))?;
            parts.push(correlate_valid(&xb, &kb, 1)?.index0(0));
        }
        Tensor::stack(&parts)
    }

    pub fn forward<T: Scalar>(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
        let x = as_4d(f1, "search embedding")?;
        let k = as_4d(f2, "template embedding")?;
        self.check(&x, &k)?;
        x.check_finite("search embedding")?;
        k.check_finite("template embedding")?;
        let mut slices = Vec::with_capacity(self.slices.len());
        for sp in &self.slices {
            let xs = match &sp.up {
                Some(p) => p.forward(&x)?,
                None => x.clone(),
            };
            let c = self.correlate(&xs, &k)?;
            let d = match &sp.down {
                Some(p) => p.forward(&c)?,
                None => c,
            };
            slices.push(center_fit(&d, self.out.0, self.out.1));
        }
        stack_scales(&slices, self.batch, self.out)
    }

    /// Returns `(grad_f1, grad_f2)` shaped like the original inputs.
    pub fn backward<T: Scalar>(&self, f1: &Tensor<T>, f2: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = as_4d(f1, "search embedding")?;
        let k = as_4d(f2, "template embedding")?;
        self.check(&x, &k)?;
        let ns = self.slices.len();
        if grad.shape() != [self.batch, ns, self.out.0, self.out.1] {
            return shape_err(format!("heatmap grad {:?}", grad.shape()));
        }
        let mut gx = Tensor::<T>::zeros(x.shape());
        let mut gk = Tensor::<T>::zeros(k.shape());
        for (si, sp) in self.slices.iter().enumerate() {
            let g = slice_of(grad, si);
            let g = center_fit_adjoint(&g, sp.fitted.0, sp.fitted.1);
            let g = match &sp.down {
                Some(p) => p.backward(&g)?,
                None => g,
            };
            debug_assert_eq!(&g.shape()[2..], &[sp.corr.0, sp.corr.1]);
            let xs = match &sp.up {
                Some(p) => p.forward(&x)?,
                None => x.clone(),
            };
            let mut gxs = Tensor::<T>::zeros(xs.shape());
            for b in 0..self.batch {
                let kb_idx = if self.template_batch == 1 { 0 } else { b };
                let xb = xs.index0(b).reshape(&prepend(xs.shape()))?;
                let kb = k.index0(kb_idx).reshape(&prepend(k.shape()))?;
                let gb = g.index0(b).reshape(&[1, 1, sp.corr.0, sp.corr.1])?;
                let (gxb, gkb) = correlate_valid_backward(&xb, &kb, 1, &gb, true)?;
                let gxb = gxb.expect("input grad requested");
                let plane = gxb.len();
                gxs.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(gxb.data());
                let kp = gkb.len();
                for (d, &v) in gk.data_mut()[kb_idx * kp..(kb_idx + 1) * kp].iter_mut().zip(gkb.data()) {
                    *d += v;
                }
            }
            let gxs = match &sp.up {
                Some(p) => p.backward(&gxs)?,
                None => gxs,
            };
            gx.add_assign(&gxs)?;
        }
        Ok((gx.reshape(f1.shape())?, gk.reshape(f2.shape())?))
    }

    fn check<T: Scalar>(&self, x: &Tensor<T>, k: &Tensor<T>) -> Result<()> {
        if x.shape() != [self.batch, self.channels, self.search.0, self.search.1]
            || k.shape() != [self.template_batch, self.channels, self.template.0, self.template.1]
        {
            return shape_err(format!("xcorr plan does not match inputs {:?} / {:?}", x.shape(), k.shape()));
        }
        Ok(())
    }
}

fn prepend(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(&shape[1..]);
    s
}

fn slice_of<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(s[0] * plane);
    for b in 0..s[0] {
        let src = (b * s[1] + k) * plane;
        out.extend_from_slice(&x.data()[src..src + plane]);
    }
    Tensor::new(vec![s[0], 1, s[2], s[3]], out).expect("slice shape")
}

fn stack_scales<T: Scalar>(slices: &[Tensor<T>], b: usize, out: (usize, usize)) -> Result<Tensor<T>> {
    let plane = out.0 * out.1;
    let mut data = Vec::with_capacity(b * slices.len() * plane);
    for bb in 0..b {
        for s in slices {
            data.extend_from_slice(&s.data()[bb * plane..(bb + 1) * plane]);
        }
    }
    Tensor::new(vec![b, slices.len(), out.0, out.1], data)
}

/// Centers the last two axes in an `oh × ow` frame, cropping or zero-filling.
pub fn center_fit<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let oy = (oh as isize - h as isize).div_euclid(2);
    let ox = (ow as isize - w as isize).div_euclid(2);
    place(x, oh, ow, oy, ox)
}

/// Adjoint of [`center_fit`] from an `h × w` input.
pub fn center_fit_adjoint<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let r = g.rank();
    let (oh, ow) = (g.shape()[r - 2], g.shape()[r - 1]);
    let oy = (oh as isize - h as isize).div_euclid(2);
    let ox = (ow as isize - w as isize).div_euclid(2);
    place(g, h, w, -oy, -ox)
}

/// `out[y + oy][x + ox] = in[y][x]` on an `oh × ow` canvas.
fn place<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize, oy: isize, ox: isize) -> Tensor<T> {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    if (h, w) == (oh, ow) && oy == 0 && ox == 0 {
        return x.clone();
    }
    let outer: usize = x.shape()[..r - 2].iter().product();
    let mut out = vec![T::zero(); outer * oh * ow];
    for o in 0..outer {
        for y in 0..h {
            let ty = y as isize + oy;
            if ty < 0 || ty >= oh as isize {
                continue;
            }
            for xx in 0..w {
                let tx = xx as isize + ox;
                if tx < 0 || tx >= ow as isize {
                    continue;
                }
                out[(o * oh + ty as usize) * ow + tx as usize] = x.data()[(o * h + y) * w + xx];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out).expect("fit shape")
}

/// Stacked heatmap `[B, S, H', W']` for the given scales.
pub fn nonparam_scale_conv<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, scales: &[f64]) -> Result<Tensor<T>> {
    XcorrPlan::new(f1.shape(), f2.shape(), scales)?.forward(f1, f2)
}

/// Max over the scale axis of a `[.., S, H, W]` heatmap, with the winning
/// scale index per location (ties to the lowest index).
pub fn pool_heatmap<T: Scalar>(h: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if h.rank() < 3 {
        return shape_err(format!("heatmap must have a scale axis, got {:?}", h.shape()));
    }
    max_over_axis(h, h.rank() - 3)
}

pub fn pool_heatmap_backward<T: Scalar>(shape: &[usize], argmax: &[usize], g: &Tensor<T>) -> Result<Tensor<T>> {
    max_over_axis_backward(shape, shape.len() - 3, argmax, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct(f1: &Tensor<f64>, f2: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2], f1.shape()[3]);
        let (th, tw) = (f2.shape()[2], f2.shape()[3]);
        Tensor::from_fn(&[b, 1, h - th + 1, w - tw + 1], |i| {
            let mut acc = 0.0;
            for ch in 0..c {
                for u in 0..th {
                    for v in 0..tw {
                        acc += f1.at(&[i[0], ch, i[2] + u, i[3] + v]) * f2.at(&[i[0], ch, u, v]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn unit_scale_is_plain_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f1 = Tensor::<f64>::randn(&[2, 3, 9, 8], 1.0, &mut rng);
        let f2 = Tensor::<f64>::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let h = nonparam_scale_conv(&f1, &f2, &[1.0]).unwrap();
        assert!(h.max_abs_diff(&direct(&f1, &f2)) < 1e-12);
    }

    #[test]
    fn matched_filter_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f1 = Tensor::<f64>::randn(&[1, 2, 12, 12], 1.0, &mut rng);
        let f2 = f1.crop2d(3, 6, 4, 4).unwrap();
        let h = nonparam_scale_conv(&f1, &f2, &[1.0]).unwrap();
        let i = crate::ops::elementwise::argmax(&h);
        assert_eq!((i / 9, i % 9), (3, 6));
    }

    #[test]
    fn template_larger_than_search_rejected() {
        let f1 = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
        let f2 = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(nonparam_scale_conv(&f1, &f2, &[1.0]).is_ok());
        assert!(nonparam_scale_conv(&f1, &f2, &[0.7]).is_err());
        assert!(nonparam_scale_conv(&f1, &Tensor::zeros(&[1, 1, 7, 7]), &[1.0]).is_err());
        assert!(nonparam_scale_conv(&f1, &f2, &[]).is_err());
    }

    #[test]
    fn template_broadcasts_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f1 = Tensor::<f64>::randn(&[3, 2, 7, 7], 1.0, &mut rng);
        let f2 = Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let h = nonparam_scale_conv(&f1, &f2, &[1.0, 1.3]).unwrap();
        for b in 0..3 {
            let one = nonparam_scale_conv(&f1.index0(b).reshape(&[1, 2, 7, 7]).unwrap(), &f2, &[1.0, 1.3]).unwrap();
            assert_eq!(h.index0(b).data(), one.data());
        }
    }

    #[test]
    fn backward_is_adjoint_of_each_argument() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = Tensor::<f64>::randn(&[2, 2, 9, 9], 1.0, &mut rng);
        let f2 = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let scales = [0.8, 1.0, 1.4];
        let plan = XcorrPlan::new(f1.shape(), f2.shape(), &scales).unwrap();
        let h = plan.forward(&f1, &f2).unwrap();
        let g = Tensor::<f64>::randn(h.shape(), 1.0, &mut rng);
        let (g1, g2) = plan.backward(&f1, &f2, &g).unwrap();
        // bilinear: <g, h(f1, f2)> = <g1, f1> = <g2, f2>
        let lhs = g.dot(&h);
        assert!((lhs - g1.dot(&f1)).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - g2.dot(&f2)).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn center_fit_crops_and_embeds() {
        let x = Tensor::<f64>::from_fn(&[3, 3], |i| (i[0] * 3 + i[1]) as f64);
        let big = center_fit(&x, 5, 5);
        assert_eq!(big.at(&[2, 2]), 4.0);
        assert_eq!(big.at(&[0, 0]), 0.0);
        assert_eq!(center_fit(&big, 3, 3), x);
        let y = Tensor::<f64>::from_fn(&[6, 4], |i| (i[0] * 4 + i[1]) as f64);
        let g = Tensor::<f64>::from_fn(&[5, 7], |i| ((i[0] + 2 * i[1]) as f64).sin());
        let lhs = center_fit(&y, 5, 7).dot(&g);
        assert!((lhs - y.dot(&center_fit_adjoint(&g, 6, 4))).abs() < 1e-12);
    }

    #[test]
    fn pooled_heatmap_recovers_unique_max() {
        let mut h = Tensor::<f64>::zeros(&[3, 4, 4]);
        h.set(&[2, 1, 3], 5.0);
        let (p, idx) = pool_heatmap(&h).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.at(&[1, 3]), 5.0);
        assert_eq!(idx[7], 2);
        assert_eq!(idx[0], 0);
    }
}
