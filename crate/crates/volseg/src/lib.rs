//! Semi-supervised training framework for 3D+time volumetric segmentation
//! with spatial and temporal consistency regularization.
//!
//! The crate covers the full pipeline: a synthetic phantom cohort generator,
//! volume I/O and cross-validation splitting, the stochastic augmentation
//! distribution, displacement-field warping and registration losses, a small
//! 3D U-Net with hand-written backward passes, the training engine with its
//! ablation settings and SSL baselines, and the evaluation/report tooling.

use blas_src as _;

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod phantom;
pub mod transforms;
pub mod volume;
pub mod warp;

pub use error::{Result, VolsegError};
