//! Minimal CPU tensor layers used by the encoders.

pub mod layers;
pub mod store;

pub use layers::{BatchNorm, BnMode, Conv2d, FeatureMap, Linear};
pub use store::{ParamId, ParamStore, Tensor};
