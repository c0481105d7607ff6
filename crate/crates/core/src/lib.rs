//! Simulation and decoding for a magneto-optical rotary encoder built around a
//! modified fibre-optic circulator.
//!
//! The pipeline runs from magnetostatics (cuboid permanent magnets) through the
//! circulator's Faraday-attenuation response, rotation sweeps, calibration and
//! tracking decode, magnet-placement optimisation, and a simulated robot joint.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circulator;
pub mod config;
pub mod encoder;
pub mod error;
pub mod jointsim;
pub mod magnetostatics;
pub mod placement;
pub mod sweep;

pub use error::{Error, Result};

/// Format version stamped into every emitted metadata block.
pub const FORMAT_VERSION: &str = env!("CARGO_PKG_VERSION");
