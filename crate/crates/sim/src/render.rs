//! Compositing digits over a background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scalesiam_core::ops::resize::resize_to;
use scalesiam_core::Tensor;

use crate::background::BackgroundSource;
use crate::error::{Result, SimError};
use crate::glyphs::GlyphSource;
use crate::motion::{brownian_path, reflect};
use crate::{Dataset, DatasetSpec, Frame, FrameAnnotation, ObjectAnnotation, Sequence, SequenceMeta, SequenceSpec};

/// Alpha that rounds to a visible grey level on black counts as ink.
pub const INK: f64 = 0.5 / 255.0;

/// splitmix64 finaliser; derives independent per-sequence seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Glyph resized to side `round(glyph_size · s)`.
pub fn scaled_glyph(glyph: &Tensor<f64>, glyph_size: usize, s: f64) -> Result<Tensor<f64>> {
    let side = ((glyph_size as f64 * s).round() as usize).max(1);
    Ok(resize_to(glyph, side, side)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Top-left pixel of a `side`-wide glyph centred at `c`.
pub fn paste_origin(c: f64, side: usize) -> i64 {
    (c - side as f64 / 2.0).round() as i64
}

/// Composites a white glyph at `(x0, y0)` and returns its tight ink box
/// `[cx, cy, w, h]`, clipped to the canvas.
pub fn paste(canvas: &mut Tensor<f64>, glyph: &Tensor<f64>, x0: i64, y0: i64) -> Option<[f64; 4]> {
    let (h, w) = (canvas.shape()[0] as i64, canvas.shape()[1] as i64);
    let side = glyph.shape()[0] as i64;
    let (mut bx0, mut by0, mut bx1, mut by1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for gy in 0..side {
        for gx in 0..side {
            let (y, x) = (y0 + gy, x0 + gx);
            if y < 0 || x < 0 || y >= h || x >= w {
                continue;
            }
            let a = glyph.data()[(gy * side + gx) as usize];
            if a <= 0.0 {
                continue;
            }
            let px = &mut canvas.data_mut()[(y * w + x) as usize];
            *px = *px * (1.0 - a) + a;
            if a >= INK {
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
    }
    (bx0 < bx1).then(|| {
        let (bw, bh) = ((bx1 - bx0) as f64, (by1 - by0) as f64);
        [bx0 as f64 + bw / 2.0, by0 as f64 + bh / 2.0, bw, bh]
    })
}

fn quantize(img: &Tensor<f64>) -> Vec<u8> {
    img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Renders one sequence; `spec.seed` determines everything.
pub fn render_sequence(name: &str, spec: &SequenceSpec, glyphs: &GlyphSource, backgrounds: &BackgroundSource) -> Result<Sequence> {
    spec.validate()?;
    let f = spec.frame_size;
    let top = match spec.mode {
        crate::Mode::Translation => 1.0,
        crate::Mode::Scale => spec.scale_high,
    };
    let max_side = ((spec.glyph_size as f64 * top).round() as usize).max(1);
    if max_side > f {
        return Err(SimError::DigitTooLarge { side: max_side, frame: f });
    }
    // centres stay far enough in that the largest glyph is fully visible
    let margin = max_side as f64 / 2.0;
    let (lo, hi) = (margin, f as f64 - margin);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.gen_range(1..=spec.num_digits);
    let target_id = rng.gen_range(0..count);
    let background = backgrounds.sample(f, &mut rng)?;
    let mut objects = Vec::with_capacity(count);
    let mut betas = Vec::with_capacity(count);
    for _ in 0..count {
        let glyph = glyphs.sample(&mut rng);
        let beta = rng.gen_range(0.0..=100.0);
        let start = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let path = brownian_path(spec.length, spec.motion_sigma, spec.smoothing_window, &mut rng);
        objects.push((glyph, start, path));
        betas.push(beta);
    }

    let mut frames = Vec::with_capacity(spec.length);
    let mut annotations = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let mut canvas = background.clone();
        let mut annos = Vec::with_capacity(count);
        for (id, (glyph, start, path)) in objects.iter().enumerate() {
            let s = spec.scale_at(t, betas[id]);
            let g = scaled_glyph(glyph, spec.glyph_size, s)?;
            let side = g.shape()[0];
            let cx = reflect(start.0 + path[t].0, lo, hi);
            let cy = reflect(start.1 + path[t].1, lo, hi);
            let bbox = paste(&mut canvas, &g, paste_origin(cx, side), paste_origin(cy, side))
                .unwrap_or([cx, cy, 0.0, 0.0]);
            annos.push(ObjectAnnotation { id, bbox, scale: s });
        }
        frames.push(Frame { width: f, height: f, pixels: quantize(&canvas) });
        annotations.push(FrameAnnotation { frame: t, objects: annos });
    }
    Ok(Sequence { name: name.to_string(), meta: SequenceMeta { spec: spec.clone(), target_id, betas }, frames, annotations })
}

fn render_split(spec: &DatasetSpec, stream: u64, n: usize, glyphs: &GlyphSource, bg: &BackgroundSource) -> Result<Vec<Sequence>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.sequence.clone();
            s.seed = derive_seed(spec.sequence.seed, stream, i as u64);
            render_sequence(&format!("seq_{:04}", i), &s, glyphs, bg)
        })
        .collect()
}

/// Renders both splits; sequences are independent given their derived seeds.
pub fn generate_dataset(spec: &DatasetSpec, glyphs: &GlyphSource, backgrounds: &BackgroundSource) -> Result<Dataset> {
    spec.sequence.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: render_split(spec, 1, spec.train, glyphs, backgrounds)?,
        val: render_split(spec, 2, spec.val, glyphs, backgrounds)?,
    })
}
