//! Head-banging detection from head-only pose keypoints.
//!
//! The pipeline keeps the head region of BODY_25 detections, samples stride-5
//! windows of seven frames, rasterizes the skeletons and classifies each window
//! with a time-distributed CNN feeding an LSTM. Evaluation uses subject-disjoint
//! k-fold cross-validation with per-fold F1. Optical-flow baselines are included
//! for visual comparison.

pub mod augmentation;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod neural;
pub mod optical_flow;
pub mod pipeline;
pub mod pose_features;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
