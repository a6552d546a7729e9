mod common;

use std::sync::Arc;

use common::{away_from_zero, check_tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalesiam_core::network::{ModelConfig, ModelKind, SiameseModel};
use scalesiam_core::tape::Tape;
use scalesiam_core::{PaddingSpec, ScaleBasis, Tensor};

const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(1);
    for (stride, pad) in [
        (1, PaddingSpec::NONE),
        (1, PaddingSpec::zero(1)),
        (2, PaddingSpec::zero(1)),
        (1, PaddingSpec::circular(1)),
        (2, PaddingSpec::circular(2)),
    ] {
        let x = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let probe_shape = {
            let ho = (4 + 2 * pad.amount - 3) / stride + 1;
            [2, 3, ho, ho]
        };
        let p = Tensor::<f64>::randn(&probe_shape, 1.0, &mut r);
        let err = check_tape(&[x, k], |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad).unwrap();
            t.weighted_sum(y, &p).unwrap()
        });
        assert!(err <= TOL, "stride {} pad {:?}: {}", stride, pad, err);
    }
}

#[test]
fn scale_conv_gradients() {
    let mut r = rng(2);
    let basis = Arc::new(ScaleBasis::<f64>::build(3, 2f64.sqrt(), 3).unwrap());
    // lifting layer, then a layer mixing two neighbouring scales
    for (s_in, interscale, stride, pad) in [
        (1, 1, 1, PaddingSpec::zero(2)),
        (3, 2, 1, PaddingSpec::zero(2)),
        (3, 3, 2, PaddingSpec::circular(2)),
        (3, 1, 1, PaddingSpec::NONE),
    ] {
        let side = 6;
        let x = Tensor::<f64>::randn(&[2, s_in, 2, side, side], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[2, 2, interscale, 9], 1.0, &mut r);
        let ho = (side + 2 * pad.amount - 5) / stride + 1;
        let p = Tensor::<f64>::randn(&[2, 3, 2, ho, ho], 1.0, &mut r);
        let b = basis.clone();
        let err = check_tape(&[x, w], move |t, v| {
            let y = t.scale_conv(v[0], v[1], b.clone(), stride, pad).unwrap();
            t.weighted_sum(y, &p).unwrap()
        });
        assert!(err <= TOL, "S_in {} I {}: {}", s_in, interscale, err);
    }
}

#[test]
fn fast_1x1_gradients() {
    let mut r = rng(3);
    for interscale in 1..=3 {
        let x = Tensor::<f64>::randn(&[2, 3, 3, 4, 4], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[4, 3, interscale], 1.0, &mut r);
        let p = Tensor::<f64>::randn(&[2, 3, 4, 4, 4], 1.0, &mut r);
        let err = check_tape(&[x, w], |t, v| {
            let y = t.fast_1x1(v[0], v[1]).unwrap();
            t.weighted_sum(y, &p).unwrap()
        });
        assert!(err <= TOL, "I {}: {}", interscale, err);
    }
}

#[test]
fn scale_pool_relu_add_gradients() {
    let mut r = rng(4);
    let x = Tensor::<f64>::randn(&[2, 3, 2, 4, 4], 1.0, &mut r);
    let p = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
    let err = check_tape(&[x], |t, v| {
        let y = t.max_over_axis(v[0], 1).unwrap();
        t.weighted_sum(y, &p).unwrap()
    });
    assert!(err <= TOL, "scale_pool: {}", err);

    let a = away_from_zero(Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut r));
    let b = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut r);
    let p = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut r);
    let err = check_tape(&[a, b], |t, v| {
        let y = t.relu(v[0]);
        let s = t.add(y, v[1]).unwrap();
        t.weighted_sum(s, &p).unwrap()
    });
    assert!(err <= TOL, "relu/add: {}", err);
}

#[test]
fn batchnorm_gradients() {
    let mut r = rng(5);
    for (shape, axis) in [(vec![3, 2, 4, 4], 1), (vec![2, 3, 2, 3, 3], 2)] {
        let c = shape[axis];
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut r);
        let g = Tensor::<f64>::uniform(&[c], 0.5, 1.5, &mut r);
        let b = Tensor::<f64>::randn(&[c], 1.0, &mut r);
        let p = Tensor::<f64>::randn(&shape, 1.0, &mut r);
        let err = check_tape(&[x.clone(), g.clone(), b.clone()], |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], axis).unwrap();
            t.weighted_sum(y, &p).unwrap()
        });
        assert!(err <= TOL, "train {:?}: {}", shape, err);
        let mean = Tensor::<f64>::randn(&[c], 1.0, &mut r);
        let var = Tensor::<f64>::uniform(&[c], 0.5, 2.0, &mut r);
        let err = check_tape(&[x, g, b], |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, axis).unwrap();
            t.weighted_sum(y, &p).unwrap()
        });
        assert!(err <= TOL, "eval {:?}: {}", shape, err);
    }
}

#[test]
fn xcorr_resize_affine_gradients() {
    let mut r = rng(6);
    for scales in [vec![1.0], vec![1.0 / 2f64.sqrt(), 1.0, 2f64.sqrt()]] {
        let f1 = Tensor::<f64>::randn(&[2, 2, 8, 8], 1.0, &mut r);
        let f2 = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut r);
        let p = Tensor::<f64>::randn(&[2, scales.len(), 6, 6], 1.0, &mut r);
        let err = check_tape(&[f1, f2], |t, v| {
            let y = t.xcorr(v[0], v[1], &scales).unwrap();
            t.weighted_sum(y, &p).unwrap()
        });
        assert!(err <= TOL, "xcorr {:?}: {}", scales, err);
    }
    // broadcast template, unpooled 5-D embeddings
    let f1 = Tensor::<f64>::randn(&[3, 2, 2, 6, 6], 1.0, &mut r);
    let f2 = Tensor::<f64>::randn(&[1, 2, 2, 3, 3], 1.0, &mut r);
    let p = Tensor::<f64>::randn(&[3, 1, 4, 4], 1.0, &mut r);
    let err = check_tape(&[f1, f2], |t, v| {
        let y = t.xcorr(v[0], v[1], &[1.0]).unwrap();
        t.weighted_sum(y, &p).unwrap()
    });
    assert!(err <= TOL, "broadcast xcorr: {}", err);

    let x = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut r);
    let gain = Tensor::<f64>::full(&[1], 0.7);
    let bias = Tensor::<f64>::full(&[1], -0.2);
    let p = Tensor::<f64>::randn(&[2, 9, 7], 1.0, &mut r);
    let err = check_tape(&[x, gain, bias], |t, v| {
        let y = t.resize(v[0], 9, 7).unwrap();
        let z = t.affine(y, v[1], v[2]).unwrap();
        t.weighted_sum(z, &p).unwrap()
    });
    assert!(err <= TOL, "resize/affine: {}", err);
}

#[test]
fn bce_gradient() {
    let mut r = rng(7);
    let v = Tensor::<f64>::randn(&[2, 5, 5], 2.0, &mut r);
    let y = Tensor::<f64>::from_fn(&[2, 5, 5], |i| if i[1].abs_diff(2) + i[2].abs_diff(2) <= 1 { 1.0 } else { -1.0 });
    let w = Tensor::<f64>::from_fn(&[2, 5, 5], |i| if y.at(i) > 0.0 { 0.1 } else { 0.025 });
    let err = check_tape(&[v], |t, x| t.bce(x[0], &y, &w).unwrap());
    assert!(err <= TOL, "bce: {}", err);
}

#[test]
fn whole_model_parameter_gradients() {
    let mut r = rng(8);
    for kind in [ModelKind::Baseline, ModelKind::ScaleEquivariant] {
        let mut c = ModelConfig::desk(kind);
        c.layers.iter_mut().for_each(|l| l.channels = 2);
        c.template_size = 16;
        c.search_size = 24;
        let mut m = SiameseModel::<f64>::random(&c, &mut r).unwrap();
        m.params[m.gain].value = Tensor::full(&[1], 0.3);
        m.set_training(true);
        let z = Tensor::<f64>::randn(&[2, 1, 16, 16], 1.0, &mut r);
        let x = Tensor::<f64>::randn(&[2, 1, 24, 24], 1.0, &mut r);
        let loss_of = |model: &SiameseModel<f64>| {
            let mut t = Tape::new();
            let b = model.bind(&mut t);
            let (zv, xv) = (t.leaf(z.clone()), t.leaf(x.clone()));
            let (resp, _) = model.respond(&mut t, &b, zv, xv).unwrap();
            let s = t.value(resp).shape().to_vec();
            let y = Tensor::from_fn(&s, |i| if i[1] == s[1] / 2 && i[2] == s[2] / 2 { 1.0 } else { -1.0 });
            let w = Tensor::full(&s, 1.0);
            let l = t.bce(resp, &y, &w).unwrap();
            (t, b, l)
        };
        let (t, b, l) = loss_of(&m);
        let grads = t.backward(l).unwrap();
        let mut worst = 0.0f64;
        for pi in 0..m.params.len() {
            let analytic = grads.get(b.vars[pi]).unwrap().clone();
            // a few entries per parameter keeps the check quick
            let n = analytic.len();
            for q in [0, n / 2, n - 1] {
                let orig = m.params[pi].value.data()[q];
                let mut eval = |d: f64| {
                    m.params[pi].value.data_mut()[q] = orig + d;
                    let (t, _, l) = loss_of(&m);
                    t.value(l).data()[0]
                };
                let num = (eval(common::FD_STEP) - eval(-common::FD_STEP)) / (2.0 * common::FD_STEP);
                m.params[pi].value.data_mut()[q] = orig;
                let a = analytic.data()[q];
                let scale = analytic.max_abs().max(1e-12);
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-3 * scale));
            }
        }
        assert!(worst <= 1e-5, "{:?}: {}", kind, worst);
    }
}
