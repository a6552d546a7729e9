//! The train-then-evaluate protocol shared by the command line and tests.

use scalesiam_core::network::{ModelConfig, ModelKind, SiameseModel};
use scalesiam_sim::Dataset;

use crate::error::Result;
use crate::eval::{config_hash, mean_oscillation, ope_eval, EvalReport, ModelTracker};
use crate::trainer::{initial_model, train, TrainConfig};

/// 20 px at a 256-px frame, rescaled to the frame size.
pub fn precision_threshold(frame_size: usize) -> f64 {
    20.0 * frame_size as f64 / 256.0
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: SiameseModel<f32>,
    pub report: EvalReport,
    pub oscillation: f64,
    pub final_loss: f64,
}

pub fn train_and_eval(kind: ModelKind, model_cfg: &ModelConfig, data: &Dataset, train_cfg: &TrainConfig) -> Result<RunResult> {
    let init = initial_model::<f32>(kind, model_cfg, train_cfg.seed)?;
    let out = train(init, &data.train, train_cfg, |_| {})?;
    let mut t = ModelTracker { model: out.model.clone() };
    let px = precision_threshold(data.spec.sequence.frame_size);
    let report = ope_eval(&mut t, &data.val, px, config_hash(&(&out.model.config, train_cfg)), train_cfg.seed)?;
    let oscillation = mean_oscillation(&report);
    let final_loss = out.losses.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(RunResult { model: out.model, report, oscillation, final_loss })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
