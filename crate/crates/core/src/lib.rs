//! Cooperative 3D multi-object tracking: CAVs share detections together
//! with learned per-detection covariance, and a central tracker fuses them
//! with sequential Kalman updates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod autodiff;
pub mod config;
pub mod covnet;
pub mod error;
pub mod experiment;
pub mod features;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
