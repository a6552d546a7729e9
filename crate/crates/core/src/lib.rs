//! Tensor engine and scale-equivariant building blocks for a Siamese tracker.

pub mod basis;
pub mod error;
pub mod init_transfer;
pub mod network;
pub mod ops;
pub mod scalar;
pub mod scale_ops;
pub mod tape;
pub mod tensor;
pub mod xcorr;

pub use basis::ScaleBasis;
pub use error::{Error, Result};
pub use network::{ModelConfig, ModelKind, SiameseModel};
pub use ops::pad::{PadMode, PaddingSpec};
pub use scalar::Scalar;
pub use tensor::{Param, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ScaleBasis32 = ScaleBasis<f32>;
pub type ScaleBasis64 = ScaleBasis<f64>;
pub type Model32 = SiameseModel<f32>;
pub type Model64 = SiameseModel<f64>;
