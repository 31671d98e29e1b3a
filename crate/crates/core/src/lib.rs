//! Causal personalized speech enhancement.
//!
//! The crate covers the whole desk-scale workflow: reverberant mixture
//! simulation, d-vector extraction, the two conditioned complex-mask
//! networks, PLCPA / PLCPA-ASYM / multi-task objectives, training with
//! validation-based checkpoint selection, and scenario-stratified evaluation
//! with the target-speaker over-suppression (TSOS) measure.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod sim;
pub mod train;

pub use error::{PseError, Result};
