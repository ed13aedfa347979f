//! Facial-expression recognition built on a cascaded face-alignment network.
//!
//! The model refines a 68-point landmark estimate over a cascade of identical
//! convolutional stages while predicting an emotion class from the same
//! shared features; both objectives are trained jointly through a weighted
//! two-term loss. The crate also ships the analysis side: gradient-weighted
//! class-activation maps, frontal-subset aggregation, most-activated-landmark
//! extraction and scoring against action-unit landmark tables.
//!
//! Modules:
//! - [`types`]: images, landmark sets, label taxonomy, training config
//! - [`geometry`]: similarity transforms, warping, heatmaps, canonical shape
//! - [`network`]: the stage network, twin heads and cascade composition
//! - [`training`]: joint loss, cyclical learning rate, stagewise training
//! - [`explain`]: activation maps, landmark activation analysis, overlays
//! - [`data`]: manifests, preprocessing, the synthetic corpus, metrics
//! - [`checkpoint`]: the NPZ model archive

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod geometry;
mod interp;
pub mod network;
pub mod training;
pub mod types;

pub use error::{Error, Result};
