//! Kalman-smoothed linear deformable diffusion for curvilinear structure
//! segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`]: a small dense `f64` tensor engine with reverse-mode
//!   gradients.
//! - [`kalman`], [`deform`]: Kalman-gain smoothing of deformable kernel offsets
//!   and the linear deformable convolution built on it.
//! - [`diffusion`]: DDPM schedule, forward noising and ancestral sampling.
//! - [`attention`]: cross-attention (spatial) and channel soft-attention fusion.
//! - [`model`]: condition extractor and denoiser U-Net wiring.
//! - [`loss`], [`metrics`]: training objectives and evaluation metrics.
//! - [`data`]: synthetic vessels, preprocessing, patching, augmentation, I/O.
//! - [`optim`]: Adam with coupled weight decay.
//! - [`train`]: per-sample gradients and ensembled patch segmentation.

pub mod attention;
pub mod data;
pub mod deform;
pub mod diffusion;
pub mod error;
pub mod kalman;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kalman::{ChainMode, KalmanConfig, Orientation};
pub use tape::{Tape, Var};
pub use params::{Graph, ParamId, ParamStore};
pub use tensor::Tensor;
