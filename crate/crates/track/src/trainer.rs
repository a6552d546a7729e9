//! Pairwise logistic-loss training with momentum SGD.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalesiam_core::init_transfer::transfer_model;
use scalesiam_core::network::{ModelConfig, ModelKind, SiameseModel};
use scalesiam_core::tape::Tape;
use scalesiam_core::{Param, Scalar, Tensor};
use scalesiam_sim::Sequence;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, TrackError};
use crate::tracker::{crop, exemplar_side};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Positive radius in response cells.
    pub label_radius: f64,
    /// Largest frame gap between template and search frames.
    pub max_gap: usize,
    /// Pairs drawn per epoch; `None` draws one per training frame.
    pub pairs_per_epoch: Option<usize>,
    /// Keep the head gain at its initial value.
    pub freeze_head_gain: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            lr_start: 1e-2,
            lr_end: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_radius: 2.0,
            max_gap: 10,
            pairs_per_epoch: None,
            freeze_head_gain: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TrackError::Config("need lr_start >= lr_end > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrackError::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `lr_start · (lr_end / lr_start)^(e / (E - 1))`
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        self.lr_start * (self.lr_end / self.lr_start).powf(epoch as f64 / (self.epochs - 1) as f64)
    }
}

/// ±1 labels (positive within `radius` cells of the centre) and weights
/// giving both classes half the total mass.
pub fn make_label_map(size: usize, radius: f64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if !(radius >= 0.0) {
        return Err(TrackError::Invalid(format!("label radius {} must be non-negative", radius)));
    }
    let c = (size as f64 - 1.0) / 2.0;
    if radius > 2f64.sqrt() * size as f64 {
        return Err(TrackError::Invalid(format!("label radius {} exceeds a {}x{} map", radius, size, size)));
    }
    let labels = Tensor::from_fn(&[size, size], |i| {
        let d = ((i[0] as f64 - c).powi(2) + (i[1] as f64 - c).powi(2)).sqrt();
        if d <= radius { 1.0 } else { -1.0 }
    });
    let pos = labels.data().iter().filter(|&&v| v > 0.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TrackError::Invalid(format!("label radius {} leaves one class empty; weights are degenerate", radius)));
    }
    let weights = labels.map(|v| if v > 0.0 { 0.5 / pos as f64 } else { 0.5 / neg as f64 });
    Ok((labels, weights))
}

/// Classical momentum with an L2 term: `v ← μv + g + λθ`, `θ ← θ − lr·v`.
pub fn sgd_step<T: Scalar>(params: &mut [Param<T>], lr: f64, momentum: f64, weight_decay: f64) {
    for p in params.iter_mut() {
        let Some(g) = p.grad.take() else { continue };
        let v = p.velocity.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for ((vi, &gi), th) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
            let upd = T::lit(momentum) * *vi + gi + T::lit(weight_decay) * *th;
            *vi = upd;
            *th -= T::lit(lr) * upd;
        }
    }
}

/// A (template, search) training pair with its crops.
pub struct Pair<T> {
    pub template: Tensor<T>,
    pub search: Tensor<T>,
}

/// Crops a pair from one sequence. Both crops are centred on the target;
/// the search crop keeps the template frame's context size, so the target
/// appears at its true relative scale.
pub fn make_pair<T: Scalar>(config: &ModelConfig, seq: &Sequence, i: usize, j: usize) -> Result<Pair<T>> {
    let bi = seq.target(i).bbox;
    let bj = seq.target(j).bbox;
    let sz = exemplar_side(bi[2], bi[3], config.inference.context);
    let sx = sz * config.search_size as f64 / config.template_size as f64;
    let fi: Tensor<T> = seq.frames[i].to_tensor();
    let fj: Tensor<T> = seq.frames[j].to_tensor();
    let mi = T::lit(fi.data().iter().map(|v| v.as_f64()).sum::<f64>() / fi.len() as f64);
    let mj = T::lit(fj.data().iter().map(|v| v.as_f64()).sum::<f64>() / fj.len() as f64);
    Ok(Pair {
        template: crop(&fi, bi[0], bi[1], sz, config.template_size, mi)?,
        search: crop(&fj, bj[0], bj[1], sx, config.search_size, mj)?,
    })
}

/// Frame indices `(i, j)` with `|i - j| <= max_gap`.
pub fn sample_pair<R: Rng + ?Sized>(len: usize, max_gap: usize, rng: &mut R) -> (usize, usize) {
    let i = rng.gen_range(0..len);
    let lo = i.saturating_sub(max_gap);
    let hi = (i + max_gap).min(len - 1);
    (i, rng.gen_range(lo..=hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome<T> {
    pub model: SiameseModel<T>,
    pub losses: Vec<LossRecord>,
}

/// Loss and gradients of one batch; gradients land in `model.params[..].grad`.
pub fn batch_loss<T: Scalar>(model: &mut SiameseModel<T>, pairs: &[Pair<T>], labels: &Tensor<f64>, weights: &Tensor<f64>, learn: bool) -> Result<f64> {
    let c = &model.config;
    let (nt, ns) = (c.template_size, c.search_size);
    let b = pairs.len();
    let z = Tensor::stack(&pairs.iter().map(|p| p.template.clone()).collect::<Vec<_>>())?.reshape(&[b, 1, nt, nt])?;
    let x = Tensor::stack(&pairs.iter().map(|p| p.search.clone()).collect::<Vec<_>>())?.reshape(&[b, 1, ns, ns])?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (zv, xv) = (tape.leaf(z), tape.leaf(x));
    let (resp, stats) = model.respond(&mut tape, &bound, zv, xv)?;
    let r = tape.value(resp).shape()[1];
    if labels.shape() != [r, r] {
        return Err(TrackError::Invalid(format!("label map {:?} for a {}x{} response", labels.shape(), r, r)));
    }
    let rep = |t: &Tensor<f64>| Tensor::from_fn(&[b, r, r], |i| T::lit(t.at(&[i[1], i[2]])));
    let loss = tape.bce(resp, &rep(labels), &rep(weights))?;
    let value = tape.value(loss).data()[0].as_f64();
    if learn {
        let mut grads = tape.backward(loss)?;
        for (p, v) in model.params.iter_mut().zip(&bound.vars) {
            p.grad = grads.take(*v);
        }
        model.update_running_stats(&stats);
    }
    Ok(value)
}

/// Runs the schedule on `train`; deterministic given `config.seed`.
pub fn train<T: Scalar>(mut model: SiameseModel<T>, train: &[Sequence], config: &TrainConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let usable: Vec<&Sequence> = train.iter().filter(|s| s.len() >= 1).collect();
    if usable.is_empty() {
        return Err(TrackError::Invalid("empty training set".into()));
    }
    let r = model.feature_size(model.config.search_size) - model.feature_size(model.config.template_size) + 1;
    let (labels, weights) = make_label_map(r, config.label_radius)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = config.pairs_per_epoch.unwrap_or_else(|| usable.iter().map(|s| s.len()).sum());
    let steps = per_epoch.div_ceil(config.batch_size).max(1);
    model.set_training(true);
    let mut losses = Vec::new();
    for epoch in 0..config.epochs {
        let lr = config.lr(epoch);
        for step in 0..steps {
            let pairs = (0..config.batch_size)
                .map(|_| {
                    let s = usable[rng.gen_range(0..usable.len())];
                    let (i, j) = sample_pair(s.len(), config.max_gap, &mut rng);
                    make_pair(&model.config, s, i, j)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = batch_loss(&mut model, &pairs, &labels, &weights, true)?;
            if !loss.is_finite() {
                return Err(TrackError::Invalid(format!("loss diverged at epoch {} step {}", epoch, step)));
            }
            if config.freeze_head_gain {
                let g = model.gain;
                model.params[g].grad = None;
            }
            sgd_step(&mut model.params, lr, config.momentum, config.weight_decay);
            let rec = LossRecord { epoch, step, loss };
            on_step(&rec);
            losses.push(rec);
        }
    }
    model.set_training(false);
    Ok(TrainOutcome { model, losses })
}

/// Fresh model for `kind`; the scale-equivariant one starts from a
/// same-seed conventional twin through `transfer_model`.
pub fn initial_model<T: Scalar>(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<SiameseModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut base_cfg = config.clone();
    base_cfg.kind = ModelKind::Baseline;
    let base = SiameseModel::<T>::random(&base_cfg, &mut rng)?;
    match kind {
        ModelKind::Baseline => Ok(base),
        ModelKind::ScaleEquivariant => {
            let mut se_cfg = config.clone();
            se_cfg.kind = ModelKind::ScaleEquivariant;
            let mut se = SiameseModel::<T>::build(&se_cfg)?;
            transfer_model(&base, &mut se)?;
            Ok(se)
        }
    }
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut s = String::from("epoch,step,loss\n");
    for r in losses {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    std::fs::write(path, s).map_err(io_err(path))
}
