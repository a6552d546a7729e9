//! Siamese trackers: the conventional baseline and its scale-equivariant twin.
//!
//! Both share one layout: a backbone applied to template and search crops
//! with the same parameters, a correlation connection, a scalar gain/bias
//! head and a final scale-pool of the heatmap.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::ScaleBasis;
use crate::error::{Error, Result};
use crate::ops::elementwise::BN_MOMENTUM;
use crate::scalar::Scalar;
use crate::scale_ops::PaddingPolicy;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    ScaleEquivariant,
}

/// One convolution stage. `kernel == 1` becomes a fast 1×1 layer in the
/// scale-equivariant model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub num_scales: usize,
    pub step: f64,
    /// Inter-scale extent `I` of every scale-convolution after the lifting layer.
    pub interscale: usize,
    /// Stages followed by an extra scale-pool inside the backbone.
    #[serde(default)]
    pub pool_after: Vec<usize>,
    /// Scale-pool the embeddings before the connection.
    pub pool_embedding: bool,
    /// Scales of the non-parametric scale-convolution.
    pub xcorr_scales: Vec<f64>,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            num_scales: 3,
            step: std::f64::consts::SQRT_2,
            interscale: 1,
            pool_after: Vec::new(),
            pool_embedding: true,
            xcorr_scales: vec![1.0],
        }
    }
}

/// Greedy three-crop inference constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub context: f64,
    pub scale_step: f64,
    pub scale_penalty: f64,
    pub scale_damping: f64,
    pub window_influence: f64,
    pub upsample: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { context: 0.5, scale_step: 1.0375, scale_penalty: 0.9745, scale_damping: 0.59, window_influence: 0.176, upsample: 16 }
    }
}

impl InferenceConfig {
    /// Scale step and damping sized for digits that change scale by several
    /// percent per frame.
    pub fn desk() -> Self {
        Self { scale_step: 1.1, scale_damping: 1.0, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
    pub padding: PaddingPolicy,
    pub scale: ScaleConfig,
    pub template_size: usize,
    pub search_size: usize,
    pub inference: InferenceConfig,
}

impl ModelConfig {
    /// Four 3×3 stages (96, 128, 256, 256 channels; strides 2, 2, 2, 1),
    /// widths divided by `width_div`.
    pub fn mnist(kind: ModelKind, width_div: usize, in_channels: usize) -> Self {
        let w = |c: usize| (c / width_div.max(1)).max(1);
        Self {
            kind,
            in_channels,
            layers: vec![
                ConvSpec { kernel: 3, channels: w(96), stride: 2 },
                ConvSpec { kernel: 3, channels: w(128), stride: 2 },
                ConvSpec { kernel: 3, channels: w(256), stride: 2 },
                ConvSpec { kernel: 3, channels: w(256), stride: 1 },
            ],
            padding: PaddingPolicy::Same,
            scale: ScaleConfig::default(),
            template_size: 32,
            search_size: 64,
            inference: InferenceConfig::default(),
        }
    }

    /// Desk-scale preset: grayscale, quarter widths, embeddings correlated
    /// with their scale axis intact, and a coarser crop-scale search.
    pub fn desk(kind: ModelKind) -> Self {
        let mut c = Self::mnist(kind, 4, 1);
        c.scale.pool_embedding = false;
        c.inference = InferenceConfig::desk();
        c
    }

    /// Full-width preset on colour input.
    pub fn full(kind: ModelKind) -> Self {
        Self::mnist(kind, 1, 3)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("no layers".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Invalid("in_channels must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.channels == 0 || l.stride == 0 || l.kernel % 2 == 0 {
                return Err(Error::Invalid(format!("layer {}: invalid spec {:?}", i, l)));
            }
        }
        if self.kind == ModelKind::ScaleEquivariant {
            let s = &self.scale;
            if s.num_scales == 0 || s.xcorr_scales.is_empty() {
                return Err(Error::Invalid("scales list empty".into()));
            }
            if s.interscale == 0 || s.interscale > s.num_scales {
                return Err(Error::Invalid(format!("inter-scale extent {} for {} scales", s.interscale, s.num_scales)));
            }
            if !(s.step > 1.0) {
                return Err(Error::Invalid(format!("scale step must exceed 1, got {}", s.step)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv { weight: usize, stride: usize },
    ScaleConv { weight: usize, basis: Arc<ScaleBasis<T>>, stride: usize },
    Fast1x1 { weight: usize },
    BatchNorm { gamma: usize, beta: usize, mean: Tensor<T>, var: Tensor<T> },
    Relu,
    ScalePool,
}

impl<T> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::ScaleConv { .. } => "scale_conv",
            Layer::Fast1x1 { .. } => "fast_1x1",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::ScalePool => "scale_pool",
        }
    }
}

/// Parameters bound as tape leaves, in model order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Outcome of a backbone pass.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub out: Var,
    /// Output of every layer, in order.
    pub trace: Vec<Var>,
    /// Batch statistics per batch-norm layer index (training only).
    pub stats: Vec<(usize, BatchStats<f64>)>,
}

#[derive(Clone, Debug)]
pub struct SiameseModel<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub names: Vec<String>,
    pub layers: Vec<Layer<T>>,
    pub gain: usize,
    pub bias: usize,
    pub training: bool,
}

/// Scale applied to the correlation at initialization.
pub const HEAD_GAIN: f64 = 1e-3;

impl<T: Scalar> SiameseModel<T> {
    /// Builds the architecture with all-zero convolution weights.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut m = Self {
            config: config.clone(),
            params: Vec::new(),
            names: Vec::new(),
            layers: Vec::new(),
            gain: 0,
            bias: 0,
            training: false,
        };
        let se = config.kind == ModelKind::ScaleEquivariant;
        let mut bases: Vec<(usize, Arc<ScaleBasis<T>>)> = Vec::new();
        let mut c_in = config.in_channels;
        let mut lifted = false;
        let n = config.layers.len();
        for (i, spec) in config.layers.iter().enumerate() {
            let layer = if !se {
                let w = m.add_param(format!("conv{}.weight", i), &[spec.channels, c_in, spec.kernel, spec.kernel]);
                Layer::Conv { weight: w, stride: spec.stride }
            } else if spec.kernel == 1 && lifted {
                let w = m.add_param(format!("conv{}.weight", i), &[spec.channels, c_in, config.scale.interscale]);
                if spec.stride != 1 {
                    return Err(Error::Invalid(format!("layer {}: 1x1 scale layers must have stride 1", i)));
                }
                Layer::Fast1x1 { weight: w }
            } else {
                let basis = match bases.iter().find(|(k, _)| *k == spec.kernel) {
                    Some((_, b)) => b.clone(),
                    None => {
                        let b = Arc::new(ScaleBasis::build(spec.kernel, config.scale.step, config.scale.num_scales)?);
                        bases.push((spec.kernel, b.clone()));
                        b
                    }
                };
                let interscale = if lifted { config.scale.interscale } else { 1 };
                let nf = basis.num_functions();
                let w = m.add_param(format!("conv{}.weight", i), &[spec.channels, c_in, interscale, nf]);
                Layer::ScaleConv { weight: w, basis, stride: spec.stride }
            };
            m.layers.push(layer);
            lifted = se;
            if i + 1 < n {
                let g = m.add_param(format!("bn{}.gamma", i), &[spec.channels]);
                m.params[g].value = Tensor::full(&[spec.channels], T::one());
                let b = m.add_param(format!("bn{}.beta", i), &[spec.channels]);
                m.layers.push(Layer::BatchNorm {
                    gamma: g,
                    beta: b,
                    mean: Tensor::zeros(&[spec.channels]),
                    var: Tensor::full(&[spec.channels], T::one()),
                });
                m.layers.push(Layer::Relu);
            }
            if se && config.scale.pool_after.contains(&i) {
                m.layers.push(Layer::ScalePool);
                lifted = false;
            }
            c_in = spec.channels;
        }
        if se && config.scale.pool_embedding && lifted {
            m.layers.push(Layer::ScalePool);
        }
        m.gain = m.add_param("head.gain".into(), &[1]);
        m.params[m.gain].value = Tensor::full(&[1], T::lit(HEAD_GAIN));
        m.bias = m.add_param("head.bias".into(), &[1]);
        Ok(m)
    }

    /// Builds the architecture and draws He-normal convolution weights.
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::build(config)?;
        for li in 0..m.layers.len() {
            match &m.layers[li] {
                Layer::Conv { weight, .. } => {
                    let s = m.params[*weight].value.shape().to_vec();
                    let std = (2.0 / (s[1] * s[2] * s[3]) as f64).sqrt();
                    m.params[*weight].value = Tensor::randn(&s, std, rng);
                }
                Layer::ScaleConv { weight, basis, .. } => {
                    let s = m.params[*weight].value.shape().to_vec();
                    let k = basis.base_size();
                    let std = (2.0 / (s[1] * s[2] * k * k) as f64).sqrt();
                    m.params[*weight].value = Tensor::randn(&s, std, rng);
                }
                Layer::Fast1x1 { weight } => {
                    let s = m.params[*weight].value.shape().to_vec();
                    let std = (2.0 / (s[1] * s[2]) as f64).sqrt();
                    m.params[*weight].value = Tensor::randn(&s, std, rng);
                }
                _ => {}
            }
        }
        Ok(m)
    }

    fn add_param(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.push(Param::new(Tensor::zeros(shape)));
        self.names.push(name);
        self.params.len() - 1
    }

    pub fn is_scale_equivariant(&self) -> bool {
        self.config.kind == ModelKind::ScaleEquivariant
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect() }
    }

    /// The model may only contain scale-equivariant spatial ops before the
    /// connection when it is the scale-equivariant variant.
    pub fn audit_equivariance(&self) -> Result<()> {
        if !self.is_scale_equivariant() {
            return Ok(());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Conv { .. } = l {
                return Err(Error::Invalid(format!("layer {} is a plain convolution", i)));
            }
        }
        Ok(())
    }

    /// Runs the backbone on `[B, C, H, W]` images.
    pub fn embed(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Embedding> {
        let s = tape.value(image).shape().to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::Shape(format!("image {:?} for {} input channels", s, self.config.in_channels)));
        }
        let mut x = if self.is_scale_equivariant() { tape.reshape(image, &[s[0], 1, s[1], s[2], s[3]])? } else { image };
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv { weight, stride } => {
                    let k = self.params[*weight].value.shape()[2];
                    let pad = self.config.padding.spec(k, self.training);
                    tape.conv2d(x, bound.vars[*weight], *stride, pad)?
                }
                Layer::ScaleConv { weight, basis, stride } => {
                    let pad = self.config.padding.spec(basis.max_grid_size(), self.training);
                    if tape.value(x).rank() == 4 {
                        let s = tape.value(x).shape().to_vec();
                        x = tape.reshape(x, &[s[0], 1, s[1], s[2], s[3]])?;
                    }
                    tape.scale_conv(x, bound.vars[*weight], basis.clone(), *stride, pad)?
                }
                Layer::Fast1x1 { weight } => tape.fast_1x1(x, bound.vars[*weight])?,
                Layer::BatchNorm { gamma, beta, mean, var } => {
                    let axis = tape.value(x).rank() - 3;
                    if self.training {
                        let (y, st) = tape.batchnorm_train(x, bound.vars[*gamma], bound.vars[*beta], axis)?;
                        stats.push((
                            li,
                            BatchStats {
                                mean: st.mean.iter().map(|v| v.as_f64()).collect(),
                                var_unbiased: st.var_unbiased.iter().map(|v| v.as_f64()).collect(),
                            },
                        ));
                        y
                    } else {
                        tape.batchnorm_eval(x, bound.vars[*gamma], bound.vars[*beta], mean, var, axis)?
                    }
                }
                Layer::Relu => tape.relu(x),
                Layer::ScalePool => tape.max_over_axis(x, 1)?,
            };
            trace.push(x);
        }
        Ok(Embedding { out: x, trace, stats })
    }

    /// Heatmap logits `[B, H', W']` for templates `z` and search crops `x`;
    /// `z` may hold one template shared by every search crop.
    pub fn respond(&self, tape: &mut Tape<T>, bound: &Bound, z: Var, x: Var) -> Result<(Var, Vec<(usize, BatchStats<f64>)>)> {
        let ez = self.embed(tape, bound, z)?;
        let ex = self.embed(tape, bound, x)?;
        let mut stats = ez.stats;
        stats.extend(ex.stats);
        let r = self.connect(tape, bound, ex.out, ez.out)?;
        Ok((r, stats))
    }

    /// Correlation, head and final scale-pool.
    pub fn connect(&self, tape: &mut Tape<T>, bound: &Bound, search: Var, template: Var) -> Result<Var> {
        let scales: Vec<f64> = if self.is_scale_equivariant() { self.config.scale.xcorr_scales.clone() } else { vec![1.0] };
        let h = tape.xcorr(search, template, &scales)?;
        let h = tape.affine(h, bound.vars[self.gain], bound.vars[self.bias])?;
        tape.max_over_axis(h, 1)
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<f64>)]) {
        let m = BN_MOMENTUM;
        for (li, st) in stats {
            if let Layer::BatchNorm { mean, var, .. } = &mut self.layers[*li] {
                for (c, (&bm, &bv)) in st.mean.iter().zip(&st.var_unbiased).enumerate() {
                    let rm = mean.data()[c].as_f64();
                    let rv = var.data()[c].as_f64();
                    mean.data_mut()[c] = T::lit((1.0 - m) * rm + m * bm);
                    var.data_mut()[c] = T::lit((1.0 - m) * rv + m * bv);
                }
            }
        }
    }

    /// Batch-norm running statistics as `(name, tensor)` pairs.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm { mean, var, .. } = l {
                out.push((format!("layers.{}.running_mean", li), mean));
                out.push((format!("layers.{}.running_var", li), var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (li, l) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm { mean, var, .. } = l {
                out.push((format!("layers.{}.running_mean", li), mean));
                out.push((format!("layers.{}.running_var", li), var));
            }
        }
        out
    }

    /// Convenience eval-style forward on plain tensors.
    pub fn response(&self, z: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let xv = tape.leaf(x.clone());
        let (r, _) = self.respond(&mut tape, &b, zv, xv)?;
        Ok(tape.value(r).clone())
    }

    /// Backbone outputs of every layer for plain tensors.
    pub fn features(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let v = tape.leaf(image.clone());
        let e = self.embed(&mut tape, &b, v)?;
        Ok(e.trace.iter().map(|&t| tape.value(t).clone()).collect())
    }

    /// Embedding spatial size for an input of side `n`.
    pub fn feature_size(&self, n: usize) -> usize {
        let mut s = n;
        for l in &self.config.layers {
            s = match self.config.padding {
                PaddingPolicy::Same | PaddingPolicy::Circular | PaddingPolicy::Zero => (s - 1) / l.stride + 1,
                PaddingPolicy::Valid => (s - l.kernel) / l.stride + 1,
            };
        }
        s
    }

    pub fn cast<U: Scalar>(&self) -> Result<SiameseModel<U>> {
        let mut m = SiameseModel::<U>::build(&self.config)?;
        for (d, s) in m.params.iter_mut().zip(&self.params) {
            d.value = s.value.cast();
        }
        let src: Vec<Tensor<U>> = self.buffers().into_iter().map(|(_, t)| t.cast()).collect();
        for ((_, d), s) in m.buffers_mut().into_iter().zip(src) {
            *d = s;
        }
        m.training = self.training;
        Ok(m)
    }
}

/// Closed-form parameter count of a configuration.
pub fn analytic_param_count(config: &ModelConfig) -> usize {
    let mut c_in = config.in_channels;
    let n = config.layers.len();
    let mut total = 2;
    for (i, l) in config.layers.iter().enumerate() {
        let spatial = match config.kind {
            ModelKind::Baseline => l.kernel * l.kernel,
            ModelKind::ScaleEquivariant => {
                let inter = if i == 0 { 1 } else { config.scale.interscale };
                inter * if l.kernel == 1 && i > 0 { 1 } else { l.kernel * l.kernel }
            }
        };
        total += spatial * c_in * l.channels;
        if i + 1 < n {
            total += 2 * l.channels;
        }
        c_in = l.channels;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_width_counts_match_and_round_to_999k() {
        let b = SiameseModel::<f32>::build(&ModelConfig::full(ModelKind::Baseline)).unwrap();
        let s = SiameseModel::<f32>::build(&ModelConfig::full(ModelKind::ScaleEquivariant)).unwrap();
        assert_eq!(b.num_params(), 998_882);
        assert_eq!(b.num_params(), analytic_param_count(&b.config));
        assert_eq!(s.num_params(), analytic_param_count(&s.config));
        assert_eq!((b.num_params() as f64 / 1000.0).round(), 999.0);
        assert_eq!(s.num_params(), b.num_params());
    }

    #[test]
    fn desk_count_is_closed_form() {
        let c = ModelConfig::desk(ModelKind::Baseline);
        let m = SiameseModel::<f32>::build(&c).unwrap();
        let want = 9 * (24 + 24 * 32 + 32 * 64 + 64 * 64) + 2 * (24 + 32 + 64) + 2;
        assert_eq!(m.num_params(), want);
    }

    #[test]
    fn shape_chain_follows_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = ModelConfig::desk(ModelKind::Baseline);
        c.layers.iter_mut().for_each(|l| l.channels = 2);
        let m = SiameseModel::<f64>::random(&c, &mut rng).unwrap();
        let f = m.features(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        let sizes: Vec<usize> = f.iter().filter(|t| t.rank() == 4).map(|t| t.shape()[3]).collect();
        assert_eq!(sizes.first(), Some(&32));
        assert_eq!(f.last().unwrap().shape(), &[1, 2, 8, 8]);
        assert_eq!(m.feature_size(64), 8);
        assert_eq!(m.feature_size(32), 4);
        let r = m.response(&Tensor::zeros(&[1, 1, 32, 32]), &Tensor::zeros(&[3, 1, 64, 64])).unwrap();
        assert_eq!(r.shape(), &[3, 5, 5]);
    }

    #[test]
    fn se_model_passes_audit_and_baseline_is_exempt() {
        let s = SiameseModel::<f32>::build(&ModelConfig::desk(ModelKind::ScaleEquivariant)).unwrap();
        s.audit_equivariance().unwrap();
        assert!(s.layers.iter().all(|l| !matches!(l, Layer::Conv { .. })));
        assert!(!s.layers.iter().any(|l| matches!(l, Layer::ScalePool)));
        let mut pooled = ModelConfig::desk(ModelKind::ScaleEquivariant);
        pooled.scale.pool_embedding = true;
        let p = SiameseModel::<f32>::build(&pooled).unwrap();
        p.audit_equivariance().unwrap();
        assert!(matches!(p.layers.last(), Some(Layer::ScalePool)));
        let mut bad = s.clone();
        bad.layers[0] = Layer::Conv { weight: 0, stride: 2 };
        assert!(bad.audit_equivariance().is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::desk(ModelKind::ScaleEquivariant);
        c.scale.xcorr_scales.clear();
        assert!(SiameseModel::<f32>::build(&c).is_err());
        let mut c = ModelConfig::desk(ModelKind::Baseline);
        c.layers[1].channels = 0;
        assert!(SiameseModel::<f32>::build(&c).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = ModelConfig::desk(ModelKind::ScaleEquivariant);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }

    #[test]
    fn eval_embedding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = ModelConfig::desk(ModelKind::ScaleEquivariant);
        c.layers.iter_mut().for_each(|l| l.channels = 3);
        let m = SiameseModel::<f32>::random(&c, &mut rng).unwrap();
        let img = Tensor::<f32>::randn(&[1, 1, 32, 32], 1.0, &mut rng);
        assert_eq!(m.features(&img).unwrap(), m.features(&img).unwrap());
    }
}
