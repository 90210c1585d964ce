//! Residual feature pyramids with repair masks for optical flow.
//!
//! The crate bundles a small f64 tensor engine with reverse-mode autodiff,
//! the three-column feature pyramid (WFD / MP / RFD downsampling plus repair
//! masks), warping and windowed correlation, a shared-weight coarse-to-fine
//! flow estimator, a synthetic moving-sprite dataset with exact ground
//! truth, flow metrics and file formats, and a reproducible trainer with a
//! transfer-learning path and asymmetric chromatic augmentation.

pub mod autodiff;
pub mod config;
pub mod datasynth;
pub mod error;
pub mod flownet;
pub mod gradcheck;
pub mod matching;
pub mod metrics_io;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Conv2dParams, Node, Tape, LEAKY_SLOPE};
pub use error::{Result, RfpmError};
pub use tensor::Tensor;
