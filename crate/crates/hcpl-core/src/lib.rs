//! Desk-scale pipeline for multi-label protein localisation in single cells:
//! a small autodiff engine, CNN and scattering feature extractors, weakly
//! supervised training with confidence re-labelling, prediction fusion,
//! segmentation post-processing and detection-style evaluation.

pub mod augment;
pub mod cra;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gbt;
pub mod graph;
pub mod io;
pub mod layers;
pub mod loss;
pub mod models;
pub mod par;
pub mod phantom;
pub mod scattering;
pub mod segpost;
pub mod tensor;
pub mod train;
pub mod vid;

pub use error::{HcplError, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
