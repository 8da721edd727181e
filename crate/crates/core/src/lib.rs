//! Spectral interference-free training (SIFT) and its building blocks.
//!
//! - [`spectral`]: compact SVD, matrix sign (exact and Newton–Schulz),
//!   Procrustes orthogonalization, alignment and effective rank.
//! - [`optim`]: momentum, Muon, gradient projection, the SIFT direction and
//!   the blockwise training loops.
//! - [`merge`]: task vectors, singular interference and whitened merging.
//! - [`testbed`]: synthetic objective pairs with analytic gradients.
//! - [`telemetry`]: alignment/loss records, sparsity, rank traces, export.
//! - [`archive`]: on-disk model format.

pub mod archive;
pub mod error;
pub mod matrix;
pub mod merge;
pub mod model;
pub mod optim;
pub mod spectral;
pub mod telemetry;
pub mod testbed;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{ModelState, ParamBlock};
pub use optim::{
    baseline_train, sift_train, sift_direction, AlignmentSource, Baseline, DualMomentum, Method,
    OptimizerConfig, StepSchedule, SubspaceDim,
};
pub use spectral::{NsSchedule, SvdFactors};
pub use telemetry::{ExportFormat, RunTelemetry};
pub use testbed::ObjectivePair;
