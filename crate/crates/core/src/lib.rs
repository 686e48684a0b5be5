//! Desk-scale laboratory for RIS-assisted near-field links.
//!
//! The crate generates spherical-wave channels for large planar arrays,
//! trains small transformer estimators (channel estimation and blockage
//! prediction) and runs a two-timescale hierarchical DDPG controller with its
//! baselines.

pub mod channel;
pub mod control;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod geometry;
pub mod metrics;
pub mod neural;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
