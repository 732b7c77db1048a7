//! Deformable 3D image registration with inverse-consistency (GradICON)
//! regularization: a two-step multi-resolution predictor, its training
//! loop, per-pair instance optimization, evaluation metrics and file I/O.
//!
//! Maps use the pull-back convention in normalized coordinates: a
//! [`TransformMap`] on the fixed grid stores, for every fixed node, the
//! normalized position in the moving image it samples from.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod io;
pub(crate) mod kernels;
pub mod loss;
pub mod network;
pub mod preprocess;
pub mod synth;
pub mod trainer;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use eval::{LandmarkSet, MetricsReport};
pub use loss::{LossBreakdown, LossConfig};
pub use network::{ModelConfig, RegistrationModel, UNetConfig};
pub use preprocess::Modality;
pub use trainer::{DatasetSpec, InstanceConfig, Phase, TrainConfig};
pub use transform::TransformMap;
pub use volume::{Dims, Geometry, LabelVolume, NormalizedCoord, Volume};
