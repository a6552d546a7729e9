use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalesiam::experiment::median;
use scalesiam::trainer::{batch_loss, initial_model, make_label_map, make_pair, sample_pair, sgd_step, train, write_loss_csv, Pair, TrainConfig};
use scalesiam_core::network::{ModelConfig, ModelKind, SiameseModel};
use scalesiam_sim::{generate_dataset, BackgroundSource, Dataset, DatasetSpec, GlyphSource, Mode, Sequence};

fn data(train: usize, seed: u64) -> Dataset {
    let mut spec = DatasetSpec::desk(Mode::Scale, seed);
    spec.train = train;
    spec.val = 0;
    generate_dataset(&spec, &GlyphSource::Procedural, &BackgroundSource::ValueNoise).unwrap()
}

fn fixed_pairs(cfg: &ModelConfig, seqs: &[Sequence], n: usize, seed: u64) -> Vec<Pair<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let s = &seqs[k % seqs.len()];
            let (i, j) = sample_pair(s.len(), 10, &mut rng);
            make_pair(cfg, s, i, j).unwrap()
        })
        .collect()
}

fn labels(m: &SiameseModel<f32>) -> (scalesiam_core::Tensor<f64>, scalesiam_core::Tensor<f64>) {
    let c = &m.config;
    let r = m.feature_size(c.search_size) - m.feature_size(c.template_size) + 1;
    make_label_map(r, 2.0).unwrap()
}

fn eval_loss(m: &SiameseModel<f32>, pairs: &[Pair<f32>]) -> f64 {
    let mut m = m.clone();
    m.set_training(false);
    let (y, w) = labels(&m);
    batch_loss(&mut m, pairs, &y, &w, false).unwrap()
}

#[test]
fn one_epoch_lowers_the_loss_on_training_pairs() {
    let d = data(2, 31);
    for kind in [ModelKind::Baseline, ModelKind::ScaleEquivariant] {
        let cfg = ModelConfig::desk(kind);
        let init = initial_model::<f32>(kind, &cfg, 4).unwrap();
        let pairs = fixed_pairs(&cfg, &d.train, 16, 1);
        let before = eval_loss(&init, &pairs);
        let tc = TrainConfig { epochs: 1, seed: 4, ..TrainConfig::default() };
        let out = train(init, &d.train, &tc, |_| {}).unwrap();
        assert_eq!(out.losses.len(), 5);
        let after = eval_loss(&out.model, &pairs);
        assert!(after < before, "{:?}: {} -> {}", kind, before, after);
    }
}

#[test]
fn transferred_model_trains_the_full_schedule_without_nan() {
    let d = data(2, 32);
    let cfg = ModelConfig::desk(ModelKind::ScaleEquivariant);
    let init = initial_model::<f32>(ModelKind::ScaleEquivariant, &cfg, 5).unwrap();
    let tc = TrainConfig { seed: 5, ..TrainConfig::default() };
    let out = train(init, &d.train, &tc, |_| {}).unwrap();
    assert_eq!(out.losses.len(), 25);
    assert!(out.losses.iter().all(|r| r.loss.is_finite()));
    assert!(out.model.params.iter().all(|p| p.value.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let d = data(2, 33);
    let cfg = ModelConfig::desk(ModelKind::Baseline);
    let tc = TrainConfig { epochs: 2, seed: 6, ..TrainConfig::default() };
    let run = || train(initial_model::<f32>(ModelKind::Baseline, &cfg, 6).unwrap(), &d.train, &tc, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    for (p, q) in a.model.params.iter().zip(&b.model.params) {
        assert!(p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(a.model.buffers(), b.model.buffers());
}

#[test]
fn fixed_batch_loss_does_not_rise_over_ten_small_steps() {
    let d = data(2, 34);
    let mut cfg = ModelConfig::desk(ModelKind::Baseline);
    cfg.layers.iter_mut().for_each(|l| l.channels = 4);
    let mut curves = Vec::new();
    for seed in 0..3 {
        let mut m = initial_model::<f32>(ModelKind::Baseline, &cfg, seed).unwrap();
        m.set_training(true);
        let pairs = fixed_pairs(&cfg, &d.train, 8, seed);
        let (y, w) = labels(&m);
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(batch_loss(&mut m, &pairs, &y, &w, true).unwrap());
            let g = m.gain;
            m.params[g].grad = None;
            sgd_step(&mut m.params, 1e-3, 0.9, 5e-4);
        }
        curves.push(losses);
    }
    let med: Vec<f64> = (0..10).map(|k| median(&curves.iter().map(|c| c[k]).collect::<Vec<_>>())).collect();
    assert!(med.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{:?}", med);
}

#[test]
fn every_parameter_receives_gradient() {
    let d = data(2, 35);
    for kind in [ModelKind::Baseline, ModelKind::ScaleEquivariant] {
        let cfg = ModelConfig::desk(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = SiameseModel::<f32>::random(&cfg, &mut rng).unwrap();
        m.set_training(true);
        let pairs = fixed_pairs(&cfg, &d.train, 4, 2);
        let (y, w) = labels(&m);
        batch_loss(&mut m, &pairs, &y, &w, true).unwrap();
        for (n, p) in m.names.iter().zip(&m.params) {
            let g = p.grad.as_ref().unwrap_or_else(|| panic!("{:?} {} has no gradient", kind, n));
            assert!(g.max_abs() > 0.0, "{:?} {} gradient is all zero", kind, n);
        }
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let cfg = ModelConfig::desk(ModelKind::Baseline);
    let m = initial_model::<f32>(ModelKind::Baseline, &cfg, 1).unwrap();
    let e = train(m, &[], &TrainConfig::default(), |_| {}).err().unwrap();
    assert!(e.to_string().contains("empty"), "{}", e);
}

#[test]
fn loss_curve_is_written_as_csv() {
    let d = data(1, 36);
    let cfg = ModelConfig::desk(ModelKind::Baseline);
    let m = initial_model::<f32>(ModelKind::Baseline, &cfg, 1).unwrap();
    let tc = TrainConfig { epochs: 1, pairs_per_epoch: Some(16), ..TrainConfig::default() };
    let out = train(m, &d.train, &tc, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.csv");
    write_loss_csv(&p, &out.losses).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,step,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("0,1,"));
}
