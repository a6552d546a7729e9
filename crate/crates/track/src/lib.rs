//! Baseline and scale-equivariant Siamese trackers on synthetic digit
//! sequences: greedy three-crop inference, training, checkpoints and
//! one-pass evaluation.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod tracker;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Result, TrackError};
pub use eval::{ope_eval, scale_trace, translation_diagnostic, EvalReport};
pub use tracker::{BBox, TrackState, Tracker};
pub use trainer::{train, TrainConfig};
