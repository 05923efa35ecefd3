//! Audio-visual event localization guided by past and future visual motion.
//!
//! The crate bundles a small reverse-mode tensor engine, the feature
//! container format, the network modules, and the training, evaluation,
//! ablation and gradient-check drivers used by the `pfmg` binary.

pub mod error;
pub mod tensor;
pub mod params;
pub mod features;
pub mod pfme;
pub mod attention;
pub mod cmra;
pub mod head;
pub mod model;
pub mod train;
pub mod eval;
pub mod checkpoint;
pub mod ablate;
pub mod gradcheck;

pub use error::{Error, Result};
