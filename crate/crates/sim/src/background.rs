//! Clutter behind the digits.

use std::path::Path;

use rand::Rng;
use scalesiam_core::ops::resize::resize_to;
use scalesiam_core::Tensor;

use crate::error::{io_err, Result, SimError};
use crate::io::read_pgm;

#[derive(Clone, Debug)]
pub enum BackgroundSource {
    ValueNoise,
    /// Grayscale images in `[0, 1]`, randomly cropped and resized per sequence.
    Images(Vec<Tensor<f64>>),
}

impl BackgroundSource {
    /// Every `.pgm` file in `dir`, in name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(SimError::Spec(format!("no .pgm backgrounds in {}", dir.display())));
        }
        let images = paths
            .iter()
            .map(|p| {
                let (w, h, px) = read_pgm(p)?;
                Ok(Tensor::new(vec![h, w], px.iter().map(|&v| v as f64 / 255.0).collect())?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Images(images))
    }

    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Tensor<f64>> {
        match self {
            Self::ValueNoise => Ok(value_noise(size, rng)),
            Self::Images(images) => {
                let img = &images[rng.gen_range(0..images.len())];
                let (h, w) = (img.shape()[0], img.shape()[1]);
                let side = h.min(w);
                let crop = rng.gen_range(side / 2..=side).max(1);
                let y0 = rng.gen_range(0..=h - crop);
                let x0 = rng.gen_range(0..=w - crop);
                let c = img.crop2d(y0, x0, crop, crop)?;
                Ok(resize_to(&c, size, size)?.map(|v| v.clamp(0.0, 1.0)))
            }
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Three octaves of lattice value noise, scaled into `[0, 0.6]`.
pub fn value_noise<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor<f64> {
    let mut out = Tensor::zeros(&[size, size]);
    let mut amp_total = 0.0;
    for (cells, amp) in [(4usize, 1.0), (8, 0.5), (16, 0.25)] {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
        let at = |y: usize, x: usize| lattice[y * (cells + 1) + x];
        for y in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let (iy, ty) = (fy as usize, smoothstep(fy.fract()));
            for x in 0..size {
                let fx = x as f64 / size as f64 * cells as f64;
                let (ix, tx) = (fx as usize, smoothstep(fx.fract()));
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out.data_mut()[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp_total += amp;
    }
    out.map(|v| 0.6 * v / amp_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_is_bounded_and_textured() {
        let n = value_noise(64, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(n.data().iter().all(|&v| (0.0..=0.6).contains(&v)));
        let mean = n.sum() / n.len() as f64;
        let var = n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.len() as f64;
        assert!(var > 1e-3);
    }
}
