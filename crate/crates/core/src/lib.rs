//! Iterative sublayer pruning for decoder-only transformers.
//!
//! The pruner removes one attention or MLP sublayer per iteration, choosing
//! the sublayer whose removal costs the least fidelity per millisecond of
//! latency saved. Fidelity is measured after a closed-form least-squares
//! retune of the nearest MLP output projection above the removed sublayer,
//! so sublayers whose damage can be repaired are preferred.
//!
//! Module map:
//!
//! - [`model`]: the transformer, its forward passes and the `SPRM` file format
//! - [`calibration`]: token sets used for scoring and tuning
//! - [`latency`]: latency tables, the analytic latency model and measurement
//! - [`tuning`]: outlier-aware row selection and the least-squares solve
//! - [`scoring`]: sensitivities, pseudo-sensitivities and importances
//! - [`checkpoint`]: activation checkpoints and the sensitivity validity ledger
//! - [`engine`]: the pruning loop
//! - [`report`]: reports, pattern rendering, fidelity evaluation and plots

pub mod calibration;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod latency;
pub mod matrix;
pub mod model;
pub mod report;
pub mod scoring;
pub mod tuning;

pub use error::{Result, SprintError};
pub use matrix::{ActivationMatrix, Matrix};
