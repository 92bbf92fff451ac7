//! Joint masked-context training for volumetric segmentation.
//!
//! A student network is trained on both an input volume and a masked copy of
//! it. The masked prediction is supervised by the ground-truth labels and by an
//! exponential-moving-average teacher that only ever sees the unmasked volume.
//! Everything needed to run that loop lives here: a small reverse-mode
//! autodiff engine, the 3D encoder-decoder, masking, losses, AdamW, the EMA
//! schedule, evaluation metrics and a synthetic phantom dataset.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training uses
//! `f32`; gradient checks use `f64`. Aliases for both live at the crate root.

pub mod autodiff;
mod bytes;
pub mod data;
mod error;
pub mod gradsuite;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod network;
pub mod rng;
mod scalar;
pub mod trainer;

pub use autodiff::{grad_check, GradCheck, Tape, Tensor, Var};
pub use data::{PhantomConfig, VolumeSample};
pub use error::{Error, Result};
pub use losses::{ConsistencySpace, LossBreakdown, LossConfig};
pub use masking::{MaskGrid, MaskSpec};
pub use metrics::{LabelMask, SurfaceDistance, VolumeReport};
pub use network::{NetConfig, ParameterSet};
pub use scalar::Scalar;
pub use trainer::{CheckpointBundle, StepMetrics, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParameterSet32 = ParameterSet<f32>;
pub type ParameterSet64 = ParameterSet<f64>;
pub type CheckpointBundle32 = CheckpointBundle<f32>;
pub type CheckpointBundle64 = CheckpointBundle<f64>;
