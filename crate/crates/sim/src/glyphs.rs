//! Digit glyphs: MNIST IDX images, or procedural stroke digits.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use scalesiam_core::Tensor;

use crate::error::{io_err, Result, SimError};

pub const GLYPH_SIDE: usize = 28;

/// Source of `GLYPH_SIDE × GLYPH_SIDE` alpha masks in `[0, 1]`.
#[derive(Clone, Debug)]
pub enum GlyphSource {
    Procedural,
    Mnist(Vec<Vec<u8>>),
}

impl GlyphSource {
    /// Reads an IDX3 image file (e.g. `train-images-idx3-ubyte`).
    pub fn from_idx(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let bad = |msg: &str| SimError::Parse { path: path.to_path_buf(), line: 0, msg: msg.to_string() };
        if bytes.len() < 16 || bytes[..4] != [0, 0, 8, 3] {
            return Err(bad("not an IDX3 ubyte file"));
        }
        let be = |o: usize| u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        let (n, h, w) = (be(4), be(8), be(12));
        if h != GLYPH_SIDE || w != GLYPH_SIDE || bytes.len() < 16 + n * h * w || n == 0 {
            return Err(bad("unexpected IDX3 dimensions"));
        }
        Ok(Self::Mnist(bytes[16..16 + n * h * w].chunks(h * w).map(|c| c.to_vec()).collect()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<f64> {
        match self {
            Self::Procedural => procedural_digit(rng.gen_range(0..10), rng),
            Self::Mnist(images) => {
                let img = &images[rng.gen_range(0..images.len())];
                Tensor::new(vec![GLYPH_SIDE, GLYPH_SIDE], img.iter().map(|&v| v as f64 / 255.0).collect()).expect("glyph size")
            }
        }
    }
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, n: usize) -> Vec<(f64, f64)> {
    (0..=n).map(|i| {
        let a = a0 + (a1 - a0) * i as f64 / n as f64;
        (cx + rx * a.cos(), cy + ry * a.sin())
    })
    .collect()
}

/// Stroke polylines of each digit in a unit box, `y` pointing down.
fn strokes(digit: usize) -> Vec<Vec<(f64, f64)>> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.24, 0.34, 0.0, TAU, 20)],
        1 => vec![vec![(0.38, 0.27), (0.52, 0.15), (0.52, 0.85)]],
        2 => vec![vec![(0.3, 0.3), (0.4, 0.18), (0.6, 0.18), (0.7, 0.3), (0.68, 0.42), (0.3, 0.85), (0.72, 0.85)]],
        3 => vec![
            vec![(0.3, 0.2), (0.6, 0.16), (0.7, 0.3), (0.5, 0.48), (0.7, 0.62), (0.65, 0.82), (0.3, 0.84)],
            vec![(0.42, 0.48), (0.5, 0.48)],
        ],
        4 => vec![vec![(0.62, 0.85), (0.62, 0.15), (0.28, 0.62), (0.75, 0.62)]],
        5 => vec![vec![(0.7, 0.17), (0.35, 0.17), (0.32, 0.47), (0.55, 0.43), (0.7, 0.57), (0.66, 0.78), (0.5, 0.85), (0.3, 0.8)]],
        6 => vec![vec![(0.65, 0.17), (0.42, 0.3), (0.32, 0.55), (0.35, 0.78), (0.5, 0.85), (0.66, 0.75), (0.65, 0.58), (0.5, 0.5), (0.33, 0.58)]],
        7 => vec![vec![(0.28, 0.18), (0.72, 0.18), (0.45, 0.85)]],
        8 => vec![arc(0.5, 0.32, 0.15, 0.15, 0.0, TAU, 14), arc(0.5, 0.66, 0.19, 0.19, 0.0, TAU, 16)],
        _ => vec![arc(0.5, 0.35, 0.16, 0.16, 0.0, TAU, 14), vec![(0.66, 0.35), (0.6, 0.85)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// A jittered, slanted, anti-aliased stroke digit.
pub fn procedural_digit<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Tensor<f64> {
    let slant = rng.gen_range(-0.2..0.2);
    let sx = rng.gen_range(0.85..1.1);
    let sy = rng.gen_range(0.9..1.1);
    let thick = rng.gen_range(1.6..2.6);
    let lines: Vec<Vec<(f64, f64)>> = strokes(digit)
        .into_iter()
        .map(|l| {
            l.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + rng.gen_range(-0.02..0.02), y + rng.gen_range(-0.02..0.02));
                    let (u, v) = ((x - 0.5) * sx - slant * (y - 0.5), (y - 0.5) * sy);
                    // unit box onto pixels 4..24
                    (14.0 + 20.0 * u, 14.0 + 20.0 * v)
                })
                .collect()
        })
        .collect();
    Tensor::from_fn(&[GLYPH_SIDE, GLYPH_SIDE], |i| {
        let p = (i[1] as f64 + 0.5, i[0] as f64 + 0.5);
        let d = lines
            .iter()
            .flat_map(|l| l.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        (thick / 2.0 - d + 0.5).clamp(0.0, 1.0)
    })
}
