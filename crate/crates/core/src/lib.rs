//! Thermal-runaway detection for battery production lines.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic optical +
//! infrared scene generator, a paired augmentation pipeline, low-level channel
//! fusion, three small vision models trained on an in-crate autodiff engine,
//! ROC / PR evaluation, and Grad-CAM / attention explanations.

pub mod augment;
pub mod dataset;
pub mod explain;
pub mod fusion;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod trainer;
