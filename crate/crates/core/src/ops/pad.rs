use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    None,
    Zero,
    Circular,
}

/// Spatial padding applied to the last two axes, `amount` pixels per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingSpec {
    pub mode: PadMode,
    pub amount: usize,
}

impl PaddingSpec {
    pub const NONE: PaddingSpec = PaddingSpec { mode: PadMode::None, amount: 0 };

    pub fn zero(amount: usize) -> Self {
        Self { mode: PadMode::Zero, amount }
    }

    pub fn circular(amount: usize) -> Self {
        Self { mode: PadMode::Circular, amount }
    }

    /// Pixels actually added per side.
    pub fn effective(&self) -> usize {
        match self.mode {
            PadMode::None => 0,
            _ => self.amount,
        }
    }
}

fn spatial(t: &[usize]) -> Result<(usize, usize, usize)> {
    let r = t.len();
    if r < 2 {
        return shape_err("padding needs rank >= 2");
    }
    Ok((t[..r - 2].iter().product(), t[r - 2], t[r - 1]))
}

/// Pads the last two axes with zeros or by wrapping.
pub fn apply_padding<T: Scalar>(input: &Tensor<T>, spec: PaddingSpec) -> Result<Tensor<T>> {
    let p = spec.effective();
    if p == 0 {
        return Ok(input.clone());
    }
    let (outer, h, w) = spatial(input.shape())?;
    if spec.mode == PadMode::Circular && (p > h || p > w) {
        return Err(Error::PaddingTooLarge { amount: p, size: h.min(w) });
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let src = input.data();
    let mut out = vec![T::zero(); outer * hp * wp];
    for o in 0..outer {
        let sb = o * h * w;
        let db = o * hp * wp;
        match spec.mode {
            PadMode::Zero => {
                for y in 0..h {
                    let d = db + (y + p) * wp + p;
                    out[d..d + w].copy_from_slice(&src[sb + y * w..sb + (y + 1) * w]);
                }
            }
            PadMode::Circular => {
                for y in 0..hp {
                    let sy = (y + h - p % h) % h;
                    let row = sb + sy * w;
                    for x in 0..wp {
                        let sx = (x + w - p % w) % w;
                        out[db + y * wp + x] = src[row + sx];
                    }
                }
            }
            PadMode::None => unreachable!(),
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = hp;
    shape[r - 1] = wp;
    Tensor::new(shape, out)
}

/// Adjoint of [`apply_padding`]: folds a gradient on the padded grid back
/// onto the original `h × w` grid.
pub fn padding_backward<T: Scalar>(grad_padded: &Tensor<T>, spec: PaddingSpec, h: usize, w: usize) -> Result<Tensor<T>> {
    let p = spec.effective();
    if p == 0 {
        return Ok(grad_padded.clone());
    }
    let (outer, hp, wp) = spatial(grad_padded.shape())?;
    if hp != h + 2 * p || wp != w + 2 * p {
        return shape_err(format!("padded grad {}x{} for {}x{} with pad {}", hp, wp, h, w, p));
    }
    let g = grad_padded.data();
    let mut out = vec![T::zero(); outer * h * w];
    for o in 0..outer {
        let sb = o * hp * wp;
        let db = o * h * w;
        match spec.mode {
            PadMode::Zero => {
                for y in 0..h {
                    let s = sb + (y + p) * wp + p;
                    out[db + y * w..db + (y + 1) * w].copy_from_slice(&g[s..s + w]);
                }
            }
            PadMode::Circular => {
                for y in 0..hp {
                    let sy = (y + h - p % h) % h;
                    for x in 0..wp {
                        let sx = (x + w - p % w) % w;
                        out[db + sy * w + sx] += g[sb + y * wp + x];
                    }
                }
            }
            PadMode::None => unreachable!(),
        }
    }
    let mut shape = grad_padded.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pad_ones() {
        let t = Tensor::<f32>::full(&[2, 2], 1.0);
        let p = apply_padding(&t, PaddingSpec::zero(1)).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        #[rustfmt::skip]
        let expect = [0., 0., 0., 0.,
                      0., 1., 1., 0.,
                      0., 1., 1., 0.,
                      0., 0., 0., 0.];
        assert_eq!(p.data(), &expect);
    }

    #[test]
    fn circular_pad_wraps_ramp() {
        let t = Tensor::<f32>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        // pad along both axes; the single row wraps onto itself
        let p = apply_padding(&t, PaddingSpec::circular(1)).unwrap();
        assert_eq!(p.shape(), &[3, 5]);
        assert_eq!(&p.data()[5..10], &[3.0, 1.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn circular_too_large_is_rejected() {
        let t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(
            apply_padding(&t, PaddingSpec::circular(3)),
            Err(Error::PaddingTooLarge { .. })
        ));
    }

    #[test]
    fn backward_is_adjoint() {
        // <pad(x), g> == <x, pad^T(g)>
        for spec in [PaddingSpec::zero(2), PaddingSpec::circular(2), PaddingSpec::NONE] {
            let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| ((i[0] * 7 + i[1] * 3 + i[2]) as f64).sin());
            let px = apply_padding(&x, spec).unwrap();
            let g = Tensor::<f64>::from_fn(px.shape(), |i| ((i[0] + 2 * i[1] + 5 * i[2]) as f64).cos());
            let gx = padding_backward(&g, spec, 3, 4).unwrap();
            assert!((px.dot(&g) - x.dot(&gx)).abs() < 1e-12);
        }
    }
}
