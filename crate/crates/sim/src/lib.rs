//! Synthetic digit-tracking sequences with exact box and scale ground truth.
//!
//! T mode moves each digit along a smoothed random walk; S mode also
//! rescales it by the sine rule. Datasets live on disk as binary PGM frames
//! plus one JSON line of annotations per frame.

pub mod background;
pub mod error;
pub mod glyphs;
pub mod io;
pub mod motion;
pub mod render;

pub use background::BackgroundSource;
pub use error::{Result, SimError};
pub use glyphs::GlyphSource;
pub use io::{dataset_checksum, read_dataset, read_sequence, write_dataset};
pub use motion::{brownian_path, reflect, sine_scale};
pub use render::{generate_dataset, render_sequence};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Translation only.
    #[serde(rename = "T")]
    Translation,
    /// Translation plus sine-rule scaling.
    #[serde(rename = "S")]
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub mode: Mode,
    /// Upper bound; each sequence draws between 1 and this many digits.
    pub num_digits: usize,
    pub length: usize,
    pub frame_size: usize,
    /// Glyph side in pixels at scale 1.
    pub glyph_size: usize,
    pub scale_low: f64,
    pub scale_high: f64,
    pub motion_sigma: f64,
    pub smoothing_window: usize,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn desk(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            num_digits: 4,
            length: 20,
            frame_size: 64,
            glyph_size: 20,
            scale_low: 0.67,
            scale_high: 1.5,
            motion_sigma: 2.0,
            smoothing_window: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Spec(m.to_string()));
        if self.num_digits == 0 || self.num_digits > 8 {
            return bad("num_digits must be in 1..=8");
        }
        if self.length == 0 || self.frame_size == 0 || self.glyph_size == 0 {
            return bad("length, frame_size and glyph_size must be positive");
        }
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return bad("scale bounds need 0 < low <= high");
        }
        if !(self.motion_sigma >= 0.0 && self.motion_sigma.is_finite()) {
            return bad("motion_sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// Scale of an object with phase `beta` at frame `t`.
    pub fn scale_at(&self, t: usize, beta: f64) -> f64 {
        match self.mode {
            Mode::Translation => 1.0,
            Mode::Scale => sine_scale(t, beta, self.scale_low, self.scale_high),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    /// Template for every sequence; `seed` is the dataset seed.
    pub sequence: SequenceSpec,
}

impl DatasetSpec {
    /// 100 training and 20 validation sequences of 20 frames at 64×64.
    pub fn desk(mode: Mode, seed: u64) -> Self {
        Self { train: 100, val: 20, sequence: SequenceSpec::desk(mode, seed) }
    }

    /// 1000 / 100 sequences of 100 frames with up to 8 digits.
    pub fn full(mode: Mode, seed: u64) -> Self {
        let mut sequence = SequenceSpec::desk(mode, seed);
        sequence.num_digits = 8;
        sequence.length = 100;
        Self { train: 1000, val: 100, sequence }
    }

    pub fn preset(name: &str, mode: Mode, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(mode, seed)),
            "full" => Ok(Self::full(mode, seed)),
            _ => Err(SimError::Spec(format!("unknown preset {:?}", name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    /// Intensities in `[0, 1]` as an `[H, W]` tensor.
    pub fn to_tensor<T: scalesiam_core::Scalar>(&self) -> scalesiam_core::Tensor<T> {
        scalesiam_core::Tensor::new(vec![self.height, self.width], self.pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect())
            .expect("frame size")
    }
}

/// Box as `[cx, cy, w, h]` in pixels; it covers columns `cx - w/2 .. cx + w/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame: usize,
    pub objects: Vec<ObjectAnnotation>,
}

/// Per-sequence metadata stored next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub spec: SequenceSpec,
    pub target_id: usize,
    pub betas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub meta: SequenceMeta,
    pub frames: Vec<Frame>,
    pub annotations: Vec<FrameAnnotation>,
}

impl Sequence {
    pub fn target(&self, t: usize) -> &ObjectAnnotation {
        let id = self.meta.target_id;
        self.annotations[t].objects.iter().find(|o| o.id == id).expect("target annotated in every frame")
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
}
