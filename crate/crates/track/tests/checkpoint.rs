use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalesiam::checkpoint::{Checkpoint, FORMAT_VERSION};
use scalesiam::{load_checkpoint, save_checkpoint, TrackError};
use scalesiam_core::network::{ModelConfig, ModelKind, SiameseModel};
use scalesiam_core::{Scalar, Tensor};

fn model<T: Scalar>(kind: ModelKind, seed: u64) -> SiameseModel<T> {
    let mut c = ModelConfig::desk(kind);
    c.layers.iter_mut().for_each(|l| l.channels = 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SiameseModel::<T>::random(&c, &mut rng).unwrap();
    // non-trivial running statistics and head
    for (k, (_, t)) in m.buffers_mut().into_iter().enumerate() {
        *t = Tensor::uniform(t.shape(), 0.5, 1.5 + k as f64, &mut rng);
    }
    let (g, b) = (m.gain, m.bias);
    m.params[g].value = Tensor::full(&[1], T::lit(0.37));
    m.params[b].value = Tensor::full(&[1], T::lit(-0.11));
    m.set_training(false);
    m
}

fn outputs<T: Scalar>(m: &SiameseModel<T>) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let z = Tensor::<T>::uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut rng);
    let x = Tensor::<T>::uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut rng);
    m.response(&z, &x).unwrap()
}

fn round_trip<T: Scalar>(kind: ModelKind) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    let m = model::<T>(kind, 1);
    save_checkpoint(&p, &m).unwrap();
    let back = load_checkpoint::<T>(&p, Some(kind)).unwrap();
    let (a, b) = (outputs(&m), outputs(&back));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits()));
    for (p, q) in m.params.iter().zip(&back.params) {
        assert_eq!(p.value, q.value);
    }
    assert_eq!(back.config, m.config);
}

#[test]
fn round_trip_reproduces_outputs_bitwise() {
    round_trip::<f64>(ModelKind::Baseline);
    round_trip::<f64>(ModelKind::ScaleEquivariant);
    round_trip::<f32>(ModelKind::ScaleEquivariant);
}

#[test]
fn wrong_version_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    let mut ck = Checkpoint::from_model(&model::<f64>(ModelKind::Baseline, 2)).unwrap();
    ck.format_version = FORMAT_VERSION + 7;
    std::fs::write(&p, serde_json::to_string(&ck).unwrap()).unwrap();
    let e = load_checkpoint::<f64>(&p, None).unwrap_err();
    assert!(matches!(e, TrackError::Checkpoint(_)));
    assert!(e.to_string().contains("format version 8"), "{}", e);

    std::fs::write(&p, r#"{"config": {}}"#).unwrap();
    let e = load_checkpoint::<f64>(&p, None).unwrap_err();
    assert!(e.to_string().contains("no format version"), "{}", e);

    std::fs::write(&p, "{\"format_version\": 1, ").unwrap();
    assert!(matches!(load_checkpoint::<f64>(&p, None), Err(TrackError::Checkpoint(_))));
}

#[test]
fn conventional_checkpoint_is_not_loaded_as_equivariant() {
    let ck = Checkpoint::from_model(&model::<f64>(ModelKind::Baseline, 3)).unwrap();
    let e = ck.to_model::<f64>(Some(ModelKind::ScaleEquivariant)).unwrap_err();
    assert!(e.to_string().contains("transfer-init"), "{}", e);
    assert!(ck.to_model::<f64>(None).is_ok());
}

#[test]
fn missing_and_misshapen_parameters_are_rejected() {
    let ck = Checkpoint::from_model(&model::<f64>(ModelKind::ScaleEquivariant, 4)).unwrap();
    let mut missing = ck.clone();
    let gone = missing.params.remove(1).name;
    let e = missing.to_model::<f64>(None).unwrap_err();
    assert!(e.to_string().contains(&format!("missing parameter {}", gone)), "{}", e);

    let mut bent = ck.clone();
    let a = &mut bent.params[0];
    a.shape = vec![a.data.len()];
    assert!(bent.to_model::<f64>(None).unwrap_err().to_string().contains("shape"));

    let mut garbled = ck;
    garbled.params[0].data[0] = "0x1.zzp+0".into();
    assert!(garbled.to_model::<f64>(None).unwrap_err().to_string().contains("bad float"));
}

#[test]
fn non_finite_weights_are_not_saved() {
    let mut m = model::<f64>(ModelKind::Baseline, 5);
    m.params[0].value.data_mut()[0] = f64::NAN;
    assert!(Checkpoint::from_model(&m).is_err());
}
