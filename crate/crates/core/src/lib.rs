//! Crowd-counting toolkit built around density maps.
//!
//! - [`density`]: geometry-adaptive ground-truth density maps and their file formats.
//! - [`dms_ssim`]: dilated multiscale SSIM loss with an analytic gradient.
//! - [`sfem`]: mean-field CRF refinement of same-resolution multiscale features.
//! - [`model`]: a miniature three-branch network with top-down density fusion.
//! - [`train`]: synthetic scenes, cropping, Adam, the training loop and MAE/MSE.
//! - [`tensor`] and [`tape`]: the dense kernels and reverse-mode engine underneath.

pub mod density;
pub mod dms_ssim;
pub mod error;
pub mod model;
pub mod ntb;
pub mod sfem;
pub mod tape;
pub mod tensor;
pub mod train;

pub use density::{AnnotationSet, DensityMap};
pub use dms_ssim::{DmsSsimConfig, DmsSsimOutput, GaussianWindow};
pub use error::{Error, Result};
pub use model::{BackboneConfig, ForwardOutput, ModelParams};
pub use sfem::{FeatureGroup, SfemParams};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{ConvSpec, PadMode, Tensor};
pub use train::{AdamConfig, AdamState, EvalReport, LossKind, SyntheticSceneSpec, TrainConfig};
