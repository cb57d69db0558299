pub mod ablate;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod ema;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod run;
pub mod train;

pub use error::{CghError, Result};
