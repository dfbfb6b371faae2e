//! Inconsistency-mask pseudo-labelling and multi-generation self-training
//! for semantic segmentation.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod analysis;
pub mod archspec;
pub mod augment;
pub mod backend;
pub mod dataset_io;
pub mod error;
pub mod mask_core;
pub mod metrics;
pub mod morphology;
pub mod orchestrator;
pub mod pseudo_label;
pub mod quality;
pub mod raster;
pub mod scalar;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use mask_core::{ConsensusKind, ConsensusOutput};
pub use morphology::RefineParams;
pub use orchestrator::{run, Approach, RunConfig, RunOptions};
pub use raster::{BinaryMask, ClassMask, Image, ProbMap, Raster};
pub use scalar::Scalar;

pub type ProbMap32 = ProbMap<f32>;
pub type ProbMap64 = ProbMap<f64>;
pub type TrainBudget64 = archspec::TrainBudget<f64>;

/// Crate version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
