//! Spatially-aware joint-embedding self-supervised learning on synthetic
//! visuo-tactile images: data synthesis, view augmentation, a small
//! convolutional encoder with hand-written gradients, global and spatial
//! losses, the two-branch trainer, and evaluation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training runs and for checks.

pub mod augment;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod feature;
pub mod image;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;
/// Precision of gradient checks and oracles.
pub type Exact = f64;

pub type TrainState = trainer::TrainState<Real>;
pub type NetworkParams = encoder::NetworkParams<Real>;
pub type FeatureMap = feature::FeatureMap<Real>;
pub type PrototypeBank = losses::PrototypeBank<Real>;
