//! One-pass evaluation, scale traces, the translation diagnostic and the
//! 1×1 microbenchmark.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalesiam_core::basis::ScaleBasis;
use scalesiam_core::network::SiameseModel;
use scalesiam_core::scale_ops::{fast_scale_conv_1x1, fast_scale_conv_1x1_backward, scale_conv, scale_conv_backward, PaddingPolicy};
use scalesiam_core::{PaddingSpec, Scalar, Tensor};
use scalesiam_sim::Sequence;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Result, TrackError};
use crate::tracker::{crop, BBox, Tracker};

pub const NUM_THRESHOLDS: usize = 101;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

pub fn centre_error(a: &BBox, b: &BBox) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub boxes: Vec<BBox>,
    pub ious: Vec<f64>,
    pub centre_errors: Vec<f64>,
    pub pred_scales: Vec<f64>,
    pub true_scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceResult>,
    pub thresholds: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision: f64,
    pub precision_threshold: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// `0, 0.01, ..., 1`
pub fn thresholds() -> Vec<f64> {
    (0..NUM_THRESHOLDS).map(|k| k as f64 / (NUM_THRESHOLDS - 1) as f64).collect()
}

/// Fraction of frames with IoU strictly above each threshold.
pub fn success_curve(ious: &[f64], taus: &[f64]) -> Vec<f64> {
    let n = ious.len().max(1) as f64;
    taus.iter().map(|&t| ious.iter().filter(|&&v| v > t).count() as f64 / n).collect()
}

/// Area under the success curve over `[0, 1]`, by trapezoids on a grid that
/// holds every jump of the step function from both sides.
pub fn auc_trapezoid(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    let mut knots: Vec<f64> = ious.iter().map(|v| v.clamp(0.0, 1.0)).chain([0.0, 1.0]).collect();
    knots.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    knots.dedup();
    let n = ious.len() as f64;
    let above = |t: f64| ious.iter().filter(|&&v| v > t).count() as f64 / n;
    let below_or_at = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    knots.windows(2).map(|w| (w[1] - w[0]) * (above(w[0]) + below_or_at(w[1])) / 2.0).sum()
}

/// The same area as the mean of each frame's own indicator integral,
/// `∫ 1[IoU > τ] dτ = clamp(IoU, 0, 1)`.
pub fn auc_per_frame(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().map(|v| v.clamp(0.0, 1.0)).sum::<f64>() / ious.len() as f64
}

pub fn precision_at(errors: &[f64], px: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= px).count() as f64 / errors.len() as f64
}

/// Anything that proposes a box per frame after a ground-truth start.
pub trait BoxTracker {
    /// Returns predicted boxes and scale estimates for frames `1..`.
    fn run(&mut self, seq: &Sequence) -> Result<(Vec<BBox>, Vec<f64>)>;
}

pub struct ModelTracker<T> {
    pub model: SiameseModel<T>,
}

impl<T: Scalar> BoxTracker for ModelTracker<T> {
    fn run(&mut self, seq: &Sequence) -> Result<(Vec<BBox>, Vec<f64>)> {
        let f0 = seq.frames[0].to_tensor::<T>();
        let (tracker, mut state) = Tracker::init(self.model.clone(), &f0, seq.target(0).bbox)?;
        let mut boxes = Vec::with_capacity(seq.len() - 1);
        let mut scales = Vec::with_capacity(seq.len() - 1);
        for f in &seq.frames[1..] {
            let (s, _) = tracker.step(&state, &f.to_tensor())?;
            state = s;
            boxes.push(state.bbox);
            scales.push(state.scale);
        }
        Ok((boxes, scales))
    }
}

/// Reads the ground truth: a perfect tracker.
pub struct OracleTracker;

impl BoxTracker for OracleTracker {
    fn run(&mut self, seq: &Sequence) -> Result<(Vec<BBox>, Vec<f64>)> {
        let s0 = seq.target(0).scale;
        Ok((1..seq.len()).map(|t| (seq.target(t).bbox, seq.target(t).scale / s0)).unzip())
    }
}

/// Never moves from the first box.
pub struct StaticTracker;

impl BoxTracker for StaticTracker {
    fn run(&mut self, seq: &Sequence) -> Result<(Vec<BBox>, Vec<f64>)> {
        Ok((1..seq.len()).map(|_| (seq.target(0).bbox, 1.0)).unzip())
    }
}

pub fn config_hash(value: &impl Serialize) -> String {
    let text = serde_json::to_string(value).expect("serializable");
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{:02x}", b)).collect()
}

/// Initializes on frame 0 and scores frames `1..T` without re-initializing.
pub fn ope_eval(tracker: &mut dyn BoxTracker, data: &[Sequence], precision_px: f64, config_hash: String, seed: u64) -> Result<EvalReport> {
    let mut sequences = Vec::with_capacity(data.len());
    for seq in data {
        if seq.len() < 2 {
            return Err(TrackError::Invalid(format!("sequence {} has {} frame(s); at least 2 are needed", seq.name, seq.len())));
        }
        let (boxes, pred_scales) = tracker.run(seq)?;
        let s0 = seq.target(0).scale;
        let gt: Vec<BBox> = (1..seq.len()).map(|t| seq.target(t).bbox).collect();
        sequences.push(SequenceResult {
            name: seq.name.clone(),
            ious: boxes.iter().zip(&gt).map(|(a, b)| iou(a, b)).collect(),
            centre_errors: boxes.iter().zip(&gt).map(|(a, b)| centre_error(a, b)).collect(),
            true_scales: (1..seq.len()).map(|t| seq.target(t).scale / s0).collect(),
            pred_scales,
            boxes,
        });
    }
    Ok(summarize(sequences, precision_px, config_hash, seed))
}

pub fn summarize(sequences: Vec<SequenceResult>, precision_px: f64, config_hash: String, seed: u64) -> EvalReport {
    let ious: Vec<f64> = sequences.iter().flat_map(|s| s.ious.iter().copied()).collect();
    let errs: Vec<f64> = sequences.iter().flat_map(|s| s.centre_errors.iter().copied()).collect();
    let taus = thresholds();
    EvalReport {
        success: success_curve(&ious, &taus),
        thresholds: taus,
        auc: auc_trapezoid(&ious),
        precision: precision_at(&errs, precision_px),
        precision_threshold: precision_px,
        sequences,
        config_hash,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrace {
    pub name: String,
    /// `(predicted, true)` per frame.
    pub pairs: Vec<(f64, f64)>,
    pub oscillation: f64,
}

/// Population standard deviation of frame-to-frame differences.
pub fn oscillation(pred: &[f64]) -> f64 {
    if pred.len() < 2 {
        return 0.0;
    }
    let d: Vec<f64> = pred.windows(2).map(|w| w[1] - w[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

pub fn scale_trace(report: &EvalReport) -> Vec<ScaleTrace> {
    report
        .sequences
        .iter()
        .map(|s| ScaleTrace {
            name: s.name.clone(),
            pairs: s.pred_scales.iter().copied().zip(s.true_scales.iter().copied()).collect(),
            oscillation: oscillation(&s.pred_scales),
        })
        .collect()
}

pub fn mean_oscillation(report: &EvalReport) -> f64 {
    let t = scale_trace(report);
    t.iter().map(|s| s.oscillation).sum::<f64>() / t.len().max(1) as f64
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(report).expect("serializable")).map_err(io_err(&p))?;
    let mut curves = String::from("threshold,success\n");
    for (t, s) in report.thresholds.iter().zip(&report.success) {
        curves.push_str(&format!("{},{}\n", t, s));
    }
    let p = dir.join("curves.csv");
    std::fs::write(&p, curves).map_err(io_err(&p))?;
    let mut trace = String::from("sequence,frame,pred,true\n");
    for s in scale_trace(report) {
        for (t, (p, q)) in s.pairs.iter().enumerate() {
            trace.push_str(&format!("{},{},{},{}\n", s.name, t + 1, p, q));
        }
    }
    let p = dir.join("scale_trace.csv");
    std::fs::write(&p, trace).map_err(io_err(&p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationDiagnostic {
    /// `(input shift, heatmap argmax shift)` in pixels along x.
    pub table: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub max_residual: f64,
    /// Set when the fit departs from the identity beyond tolerance.
    pub flagged: bool,
}

fn argmax2(t: &Tensor<f64>) -> (usize, usize) {
    let w = t.shape()[1];
    let i = t.data().iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
    (i / w, i % w)
}

/// Shifts `image` (square `[H, W]`, side `search`) circularly by multiples of
/// the total stride and records where the pooled heatmap peak goes. The
/// template is the central crop of the unshifted image.
pub fn translation_diagnostic<T: Scalar>(model: &SiameseModel<T>, image: &Tensor<T>, padding: PaddingPolicy, max_shift: usize) -> Result<TranslationDiagnostic> {
    let mut m = model.clone();
    m.config.padding = padding;
    m.set_training(false);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let nt = m.config.template_size;
    let z = crop(image, w as f64 / 2.0, h as f64 / 2.0, nt as f64, nt, T::zero())?.reshape(&[1, 1, nt, nt])?;
    let stride = m.config.total_stride();
    let steps = (max_shift / stride) as isize;
    let mut table = Vec::new();
    let mut origin = None;
    for k in -steps..=steps {
        let dx = k * stride as isize;
        let x = image.roll2d(0, dx).reshape(&[1, 1, h, w])?;
        let r: Tensor<f64> = m.response(&z, &x)?.cast();
        let (_, ax) = argmax2(&r.index0(0));
        let o = *origin.get_or_insert_with(|| {
            let r0: Tensor<f64> = m.response(&z, &image.reshaped(&[1, 1, h, w]).expect("square image")).expect("unshifted response").cast();
            argmax2(&r0.index0(0)).1
        });
        table.push((dx as f64, (ax as f64 - o as f64) * stride as f64));
    }
    let n = table.len() as f64;
    let (mx, my) = (table.iter().map(|p| p.0).sum::<f64>() / n, table.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = table.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = table.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let max_residual = table.iter().map(|p| (p.1 - slope * p.0 - intercept).abs()).fold(0.0, f64::max);
    let flagged = (slope - 1.0).abs() > 0.05 || max_residual > stride as f64 / 2.0;
    Ok(TranslationDiagnostic { table, slope, intercept, max_residual, flagged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSize {
    pub batch: usize,
    pub scales: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub interscale: usize,
    pub side: usize,
}

impl BenchSize {
    pub fn mid() -> Self {
        Self { batch: 4, scales: 3, c_in: 16, c_out: 16, interscale: 2, side: 64 }
    }

    pub fn tiny() -> Self {
        Self { batch: 1, scales: 2, c_in: 2, c_out: 2, interscale: 1, side: 4 }
    }

    pub fn label(&self) -> String {
        format!("b{}s{}c{}o{}i{}x{}", self.batch, self.scales, self.c_in, self.c_out, self.interscale, self.side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub implementation: String,
    pub size: String,
    pub fwd_us: f64,
    pub bwd_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub max_abs_diff: f64,
    pub speedup: f64,
}

fn median_us(mut f: impl FnMut(), warmup: usize, runs: usize) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut t: Vec<f64> = (0..runs)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    t.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    t[t.len() / 2]
}

/// Times the fast 1×1 layer against the general scale-convolution on a
/// single-function basis, after checking both agree.
pub fn bench_conv(size: &BenchSize, warmup: usize, runs: usize) -> Result<BenchResult> {
    let warmup = warmup.max(10);
    let runs = runs.max(100);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let BenchSize { batch, scales, c_in, c_out, interscale, side } = *size;
    let x = Tensor::<f32>::randn(&[batch, scales, c_in, side, side], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[c_out, c_in, interscale], 1.0, &mut rng);
    let w4 = w.reshaped(&[c_out, c_in, interscale, 1])?;
    let basis = ScaleBasis::<f32>::build(1, std::f64::consts::SQRT_2, scales)?;
    let fast = fast_scale_conv_1x1(&x, &w)?;
    let slow = scale_conv(&x, &w4, &basis, 1, PaddingSpec::NONE)?;
    let max_abs_diff = fast.max_abs_diff(&slow) as f64;
    if max_abs_diff > 1e-6 * (1.0 + slow.max_abs() as f64) {
        return Err(TrackError::Invalid(format!("fast and reference 1x1 paths disagree by {}", max_abs_diff)));
    }
    let g = Tensor::<f32>::randn(fast.shape(), 1.0, &mut rng);
    let ff = median_us(|| drop(fast_scale_conv_1x1(&x, &w).expect("fast forward")), warmup, runs);
    let fb = median_us(|| drop(fast_scale_conv_1x1_backward(&x, &w, &g).expect("fast backward")), warmup, runs);
    let rf = median_us(|| drop(scale_conv(&x, &w4, &basis, 1, PaddingSpec::NONE).expect("reference forward")), warmup, runs);
    let rb = median_us(|| drop(scale_conv_backward(&x, &w4, &basis, 1, PaddingSpec::NONE, &g).expect("reference backward")), warmup, runs);
    let label = size.label();
    Ok(BenchResult {
        rows: vec![
            BenchRow { implementation: "fast_1x1".into(), size: label.clone(), fwd_us: ff, bwd_us: fb },
            BenchRow { implementation: "reference".into(), size: label, fwd_us: rf, bwd_us: rb },
        ],
        max_abs_diff,
        speedup: rf / ff,
    })
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut s = String::from("impl,size,fwd_us,bwd_us\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.3},{:.3}\n", r.implementation, r.size, r.fwd_us, r.bwd_us));
    }
    std::fs::write(path, s).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_frame_auc_is_the_trapezoid_value() {
        let ious = [1.0, 0.5, 0.0];
        assert!((auc_trapezoid(&ious) - 0.5).abs() < 1e-12);
        assert!((auc_per_frame(&ious) - 0.5).abs() < 1e-12);
        let s = success_curve(&ious, &thresholds());
        assert_eq!(s[0], 2.0 / 3.0);
        assert_eq!(s[50], 1.0 / 3.0);
        assert_eq!(s[100], 0.0);
    }

    #[test]
    fn perfect_frames_give_unit_auc() {
        assert_eq!(auc_trapezoid(&[1.0; 7]), 1.0);
        assert_eq!(precision_at(&[0.0, 5.0, 5.1], 5.0), 2.0 / 3.0);
    }

    #[test]
    fn oscillation_closed_forms() {
        assert_eq!(oscillation(&[1.2; 10]), 0.0);
        let d = 0.03;
        let alt: Vec<f64> = (0..11).map(|t| if t % 2 == 0 { 1.0 + d } else { 1.0 - d }).collect();
        // ten differences alternating ±2δ: zero mean, population std 2δ
        assert!((oscillation(&alt) - 2.0 * d).abs() < 1e-12);
    }

    #[test]
    fn iou_cases() {
        let a = [5.0, 5.0, 4.0, 4.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[50.0, 5.0, 4.0, 4.0]), 0.0);
        assert!((iou(&a, &[6.0, 5.0, 4.0, 4.0]) - 12.0 / 20.0).abs() < 1e-12);
    }
}
