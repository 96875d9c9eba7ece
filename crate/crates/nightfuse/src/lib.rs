//! Conditional diffusion and flow-matching models for cross-sensor
//! nighttime-lights raster fusion.
//!
//! The library covers the full pipeline: raster preprocessing, patch
//! datasets (with a synthetic paired-scene generator), noise schedules,
//! a conditional U-Net noise/velocity predictor with hand-rolled
//! reverse-mode gradients, training, seven samplers, image-quality and
//! spectral metrics, and a timing/precision benchmark harness.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod network;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
