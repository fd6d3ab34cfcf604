//! Regularized metric learning with robustness-based generalization
//! certificates.
//!
//! The pieces, bottom up:
//!
//! * [`model`]: datasets, metric models and pair/triplet losses.
//! * [`solver`]: proximal subgradient training of Mahalanobis, bilinear,
//!   triplet and kernelized metrics.
//! * [`cover`]: greedy covers and the label-aware partition.
//! * [`bounds`]: robustness constants, probe estimates and the bounds.
//! * [`harness`]: synthetic tasks, experiments, curves and k-NN evaluation.

pub mod bounds;
pub mod cover;
pub mod error;
pub mod exec;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod solver;

pub use error::{Error, Result};
