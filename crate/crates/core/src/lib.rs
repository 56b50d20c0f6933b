//! Measuring and exploiting the mergeability of model updates.
//!
//! * [`linalg`]: dense matrices, thin SVD, softmax, rank statistics.
//! * [`adapter`]: low-rank and dense model updates and the `.mrga` container.
//! * [`merge`]: mean, inverse-accuracy weighted, TIES and KnOTS-style merging.
//! * [`eval`]: option scoring, prediction and task accuracy.
//! * [`mergeability`]: Monte-Carlo score estimation, binomial baseline, bins,
//!   locality experiment.
//! * [`analysis`]: per-update cause metrics, binned summaries, correlations.
//! * [`toy`]: a trainable miniature model and synthetic fact universe.
//! * [`pipeline`]: config-driven orchestration used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod analysis;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod merge;
pub mod mergeability;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod toy;

pub use error::{Error, Result};
