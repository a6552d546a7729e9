//! Greedy three-crop inference.

use scalesiam_core::network::{InferenceConfig, SiameseModel};
use scalesiam_core::ops::resize::resize_to;
use scalesiam_core::tape::Tape;
use scalesiam_core::{Scalar, Tensor};

use crate::error::{Result, TrackError};

/// `[cx, cy, w, h]` in pixels.
pub type BBox = [f64; 4];

/// Square crop of side `side` centred at `(cx, cy)`, bilinearly sampled onto
/// an `out × out` grid; samples outside the frame take `fill`.
pub fn crop<T: Scalar>(frame: &Tensor<T>, cx: f64, cy: f64, side: f64, out: usize, fill: T) -> Result<Tensor<T>> {
    if !(side > 0.0 && side.is_finite()) || out == 0 {
        return Err(TrackError::Invalid(format!("degenerate crop of side {}", side)));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let px = |y: isize, x: isize| -> T {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            fill
        } else {
            frame.data()[y as usize * w + x as usize]
        }
    };
    let step = side / out as f64;
    Ok(Tensor::from_fn(&[out, out], |i| {
        // pixel centres sit at integer + 0.5
        let fy = cy + (i[0] as f64 + 0.5 - out as f64 / 2.0) * step - 0.5;
        let fx = cx + (i[1] as f64 + 0.5 - out as f64 / 2.0) * step - 0.5;
        let (y0, x0) = (fy.floor(), fx.floor());
        let (ty, tx) = (fy - y0, fx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let v = px(y0, x0).as_f64() * (1.0 - ty) * (1.0 - tx)
            + px(y0, x0 + 1).as_f64() * (1.0 - ty) * tx
            + px(y0 + 1, x0).as_f64() * ty * (1.0 - tx)
            + px(y0 + 1, x0 + 1).as_f64() * ty * tx;
        T::lit(v)
    }))
}

/// Exemplar side with context: `sqrt((w + p)(h + p))`, `p = context · (w + h)`.
pub fn exemplar_side(w: f64, h: f64, context: f64) -> f64 {
    let p = context * (w + h);
    ((w + p) * (h + p)).sqrt()
}

/// Outer product of two Hann windows, normalised to unit sum.
pub fn hann_window(n: usize) -> Tensor<f64> {
    let h: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 1.0 } else { 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos() })
        .collect();
    let w = Tensor::from_fn(&[n, n], |i| h[i[0]] * h[i[1]]);
    let s = w.sum();
    w.scale(1.0 / s)
}

fn mean<T: Scalar>(t: &Tensor<T>) -> T {
    T::lit(t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub bbox: BBox,
    /// Product of accepted per-frame scale factors.
    pub scale: f64,
    /// Search crop side in frame pixels.
    pub search_side: f64,
}

/// Per-frame output of the greedy search.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Raw responses, one per search crop: `[3, R, R]`.
    pub heatmap: Tensor<f64>,
    /// Index of the winning crop (0 shrink, 1 keep, 2 grow).
    pub best: usize,
}

/// A model in evaluation mode with a fixed template embedding.
pub struct Tracker<T> {
    pub model: SiameseModel<T>,
    pub cfg: InferenceConfig,
    template: Tensor<T>,
    window: Tensor<f64>,
}

impl<T: Scalar> Tracker<T> {
    /// Embeds the exemplar around `bbox` in `frame` (`[H, W]`).
    pub fn init(mut model: SiameseModel<T>, frame: &Tensor<T>, bbox: BBox) -> Result<(Self, TrackState)> {
        model.set_training(false);
        let c = model.config.clone();
        let cfg = c.inference.clone();
        let sz = exemplar_side(bbox[2], bbox[3], cfg.context);
        let z = crop(frame, bbox[0], bbox[1], sz, c.template_size, mean(frame))?;
        let z = z.reshape(&[1, 1, c.template_size, c.template_size])?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let zv = tape.leaf(z);
        let e = model.embed(&mut tape, &b, zv)?;
        let template = tape.value(e.out).clone();
        let r = model.feature_size(c.search_size) - model.feature_size(c.template_size) + 1;
        let window = hann_window(r * cfg.upsample);
        let state = TrackState { bbox, scale: 1.0, search_side: sz * c.search_size as f64 / c.template_size as f64 };
        Ok((Self { model, cfg, template, window }, state))
    }

    /// Raw responses of `[B, 1, S, S]` search crops against the template.
    pub fn respond(&self, crops: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape);
        let xv = tape.leaf(crops);
        let e = self.model.embed(&mut tape, &b, xv)?;
        let zv = tape.leaf(self.template.clone());
        let r = self.model.connect(&mut tape, &b, e.out, zv)?;
        Ok(tape.value(r).clone())
    }

    pub fn step(&self, state: &TrackState, frame: &Tensor<T>) -> Result<(TrackState, StepOutput)> {
        let c = &self.model.config;
        let cfg = &self.cfg;
        let n = c.search_size;
        let factors = [1.0 / cfg.scale_step, 1.0, cfg.scale_step];
        let fill = mean(frame);
        let crops = factors
            .iter()
            .map(|&f| crop(frame, state.bbox[0], state.bbox[1], state.search_side * f, n, fill))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack(&crops)?.reshape(&[3, 1, n, n])?;
        let heat: Tensor<f64> = self.respond(batch)?.cast();
        let r = heat.shape()[1];
        let u = r * cfg.upsample;
        let mut best = (1, f64::NEG_INFINITY);
        let mut maps = Vec::with_capacity(3);
        for (i, _) in factors.iter().enumerate() {
            let mut m = resize_to(&heat.index0(i), u, u)?;
            if i != 1 {
                m = m.scale(cfg.scale_penalty);
            }
            let peak = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if peak > best.1 {
                best = (i, peak);
            }
            maps.push(m);
        }
        let m = &maps[best.0];
        let lo = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let shifted = m.map(|v| v - lo);
        let total = shifted.sum();
        let norm = if total > 0.0 { shifted.scale(1.0 / total) } else { shifted };
        let wi = cfg.window_influence;
        let mixed = norm.zip_map(&self.window, |a, b| (1.0 - wi) * a + wi * b)?;
        let arg = mixed.data().iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0;
        let (py, px) = ((arg / u) as f64, (arg % u) as f64);
        let centre = (u as f64 - 1.0) / 2.0;
        let to_frame = c.total_stride() as f64 / cfg.upsample as f64 * state.search_side * factors[best.0] / n as f64;
        let (fh, fw) = (frame.shape()[0] as f64, frame.shape()[1] as f64);
        let cx = (state.bbox[0] + (px - centre) * to_frame).clamp(0.0, fw);
        let cy = (state.bbox[1] + (py - centre) * to_frame).clamp(0.0, fh);
        let f = 1.0 - cfg.scale_damping + cfg.scale_damping * factors[best.0];
        let scale = (state.scale * f).clamp(0.2, 5.0);
        let f = scale / state.scale;
        let next = TrackState { bbox: [cx, cy, state.bbox[2] * f, state.bbox[3] * f], scale, search_side: state.search_side * f };
        Ok((next, StepOutput { heatmap: heat, best: best.0 }))
    }
}
