//! Patch-based multimodal brain-volume classification pipeline.
//!
//! The crate covers the full chain: synthetic cohort generation, spatial
//! k-means patch atlases at multiple scales, per-patch volume and PET
//! features, a branch-plus-fusion deep network trained with autoencoder
//! pretraining and staged fine-tuning, and a subject-level cross-validated
//! ensemble experiment harness.
//!
//! Core numerics are generic over the scalar type (see [`scalar::Scalar`]);
//! the pipeline runs in `f32` while verification oracles use `f64`.

pub mod atlas;
pub mod cohort;
pub mod error;
pub mod experiment;
pub mod features;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};

/// Scalar type used by the production pipeline.
pub type Real = f32;

/// Dense network parameters at pipeline precision.
pub type Mlp32 = nn::MlpParams<f32>;
/// Dense network parameters at oracle precision.
pub type Mlp64 = nn::MlpParams<f64>;
/// Full branch-plus-fusion model at pipeline precision.
pub type Model32 = model::MmdnnParams<f32>;
