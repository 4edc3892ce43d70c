//! Soft-tissue lesion candidate detection for mammography-like images.
//!
//! The crate is organised along the processing chain:
//!
//! - [`imaging`]: image container, breast mask estimation and preprocessing
//!   (band normalisation, anti-aliased resampling to 0.2 mm, unit scaling).
//! - [`autodiff`]: a small reverse-mode differentiation engine with exactly
//!   the layers the network needs, plus SGD with momentum and a plateau
//!   learning-rate schedule.
//! - [`unet`]: the u-net assembled from [`autodiff`] layers, and full-image
//!   inference.
//! - [`dataset`]: exam records, exam-level splits, patch sampling, epoch
//!   composition, flip augmentation and a synthetic phantom generator.
//! - [`candidates`]: probability map to candidate points; lesion masks to
//!   centre-of-mass points.
//! - [`froc`]: image-based and exam-based FROC curves.
//! - [`training`]: the epoch loop tying the above together.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod candidates;
pub mod config;
pub mod dataset;
mod error;
pub mod froc;
pub mod imaging;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
