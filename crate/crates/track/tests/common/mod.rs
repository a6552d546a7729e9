#![allow(dead_code)]

use scalesiam::BBox;
use scalesiam_core::network::{ConvSpec, InferenceConfig, ModelConfig, ModelKind, SiameseModel};
use scalesiam_core::Tensor;
use scalesiam_sim::{Frame, FrameAnnotation, Mode, ObjectAnnotation, Sequence, SequenceMeta, SequenceSpec};

/// Single 3×3 stage whose kernel is a centred delta: the embedding is the
/// crop itself and the response is plain template matching.
pub fn identity_model(template: usize, search: usize) -> SiameseModel<f64> {
    let mut c = ModelConfig::desk(ModelKind::Baseline);
    c.layers = vec![ConvSpec { kernel: 3, channels: 1, stride: 1 }];
    c.template_size = template;
    c.search_size = search;
    c.inference = InferenceConfig::default();
    let mut m = SiameseModel::build(&c).unwrap();
    m.params[0].value.set(&[0, 0, 1, 1], 1.0);
    m
}

/// Concentric rings around `(cx, cy)` with spacing dilated by `s`. The
/// amplitude does not depend on `s`, so a plain correlation is not biased
/// towards the larger copy.
pub fn pattern_frame(side: usize, cx: f64, cy: f64, s: f64) -> Tensor<f64> {
    Tensor::from_fn(&[side, side], |i| {
        let u = (i[1] as f64 + 0.5 - cx) / s;
        let v = (i[0] as f64 + 0.5 - cy) / s;
        (0.8 * (u * u + v * v).sqrt()).cos()
    })
}

/// Sequence with one object whose boxes are given per frame; frames are
/// filled by `paint`.
pub fn hand_sequence(name: &str, boxes: &[BBox], side: usize, paint: impl Fn(&BBox) -> Vec<u8>) -> Sequence {
    let frames = boxes.iter().map(|b| Frame { width: side, height: side, pixels: paint(b) }).collect();
    let annotations = boxes
        .iter()
        .enumerate()
        .map(|(t, b)| FrameAnnotation { frame: t, objects: vec![ObjectAnnotation { id: 0, bbox: *b, scale: b[2] / boxes[0][2] }] })
        .collect();
    let mut spec = SequenceSpec::desk(Mode::Translation, 0);
    spec.length = boxes.len();
    spec.frame_size = side;
    Sequence { name: name.into(), meta: SequenceMeta { spec, target_id: 0, betas: vec![0.0] }, frames, annotations }
}

/// White square on black covering the box.
pub fn square_painter(side: usize) -> impl Fn(&BBox) -> Vec<u8> {
    move |b| {
        let mut px = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if (fx - b[0]).abs() < b[2] / 2.0 && (fy - b[1]).abs() < b[3] / 2.0 {
                    px[y * side + x] = 255;
                }
            }
        }
        px
    }
}
