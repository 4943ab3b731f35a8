//! Tracking of many near-identical objects from per-frame detections.
//!
//! The pipeline has two stages. [`fragments`] links detections in
//! consecutive frames by a configuration cost (position, class, axis
//! orientation and motion) into short, reliable track fragments. [`joiner`]
//! then grows a set of initial trajectories by repeatedly training an
//! appearance classifier ([`appearance`]) on each identity's recent patches
//! and using it to pick, frame by frame, which nearby detection or fragment
//! continues each identity.
//!
//! [`synth`] generates a 2D hive benchmark with ground truth and
//! [`metrics`] scores reconstructed trajectories against it.

// validation uses `!(x > 0.0)` on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appearance;
pub mod config;
pub mod detection;
pub mod error;
pub mod fragments;
pub mod image;
pub mod joiner;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Identity classifier at production precision.
pub type Classifier = appearance::LinearSoftmax<f32>;
/// Double precision classifier, used for gradient and optimizer checks.
pub type Classifier64 = appearance::LinearSoftmax<f64>;
