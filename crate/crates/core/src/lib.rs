//! Group-robust last-layer retraining on synthetic spurious-correlation data.
//!
//! The crate trains small MLPs by ERM on group-imbalanced data, then
//! retrains a linear classifier on a group-balanced held-out split using
//! either the penultimate features (DFR), the penultimate features with
//! retrained BatchNorm affine parameters (Affine-DFR), or a sparse subset of
//! features pooled from every layer and chosen by a group-lasso probe
//! (H2T-DFR).

pub mod data;
pub mod error;
pub mod exec;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
pub use exec::Execution;
pub use matrix::Matrix;
