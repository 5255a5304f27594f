//! Test-time adversarial defense by restoring feature-map equivariance.
//!
//! The crate bundles a small f64 reverse-mode autodiff engine, toy
//! classification/segmentation networks, invertible image transforms, the
//! equivariance and invariance objectives, L∞ attacks (including adaptive
//! and BPDA variants), the recalibration defense, an output-equivariance
//! anomaly detector and an experiment harness.

pub mod attack;
pub mod data;
pub mod defense;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod parallel;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
