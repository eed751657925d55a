//! Continuous convolutional networks (CCNN) with multiplicative Gabor
//! kernels, applied to tokamak disruption prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`gradcore`] — a small reverse-mode differentiation engine over dense
//!   `f64` tensors.
//! * [`kernels`] — continuous MAGNet kernels sampled onto causal filters.
//! * [`model`] — the CCNN classifier built from separable continuous blocks.
//! * [`shots`] — shot data model, dataset container, preprocessing,
//!   augmentation and a synthetic shot generator.
//! * [`train`] — dataset-composition cases, loss, optimizer and the fit loop.
//! * [`eval`] — ROC/AUC, operating points, trace and kernel export, latency.
//! * [`config`] — the JSON run configuration shared by the CLI.

#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcore;
pub mod kernels;
pub mod model;
pub mod shots;
pub mod train;

pub use error::{Error, Result};
