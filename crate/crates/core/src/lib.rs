//! Two-stage volumetric CT classification: a 3D DenseNet whose Grad-CAM
//! heatmaps select a volume of interest, and a second 3D DenseNet that
//! classifies the extracted subvolume.
//!
//! The numeric core (tensors, models, Grad-CAM) is generic over [`Scalar`];
//! training uses `f32` and gradient checks use `f64`. Concrete aliases for
//! both live at the crate root.

pub mod config;
pub mod ctprep;
pub mod dataio;
pub mod densenet;
pub mod error;
pub mod gradcam;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod volume;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};
pub use volume::Grid3;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Model32 = densenet::Model<f32>;
pub type Model64 = densenet::Model<f64>;
pub type Heatmap32 = gradcam::Heatmap<f32>;
pub type Heatmap64 = gradcam::Heatmap<f64>;
pub type Grid32 = volume::Grid3<f32>;
pub type Grid64 = volume::Grid3<f64>;
