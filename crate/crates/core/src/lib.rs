//! Tile-based volumetric segmentation toolkit.
//!
//! A volume is cut into overlapping tiles, each tile gets its own small 3D
//! convolutional network, and the per-tile label maps are fused back by
//! per-voxel majority vote. On top of that sits a transfer-learning harness
//! that compares fine-tuning on a new cohort alone against fine-tuning on a
//! mix of new and original subjects, using synthetic phantom cohorts.
//!
//! Modules:
//! - [`volio`]: NIfTI-1 subset reader/writer and cohort manifests.
//! - [`phantom`]: deterministic synthetic cohorts with exact ground truth.
//! - [`tiling`]: tile planning, extraction and majority-vote fusion.
//! - [`nnet`]: conv network, soft-Dice loss, Adam, checkpoints.
//! - [`evaluation`]: Dice metrics, volumes, Wilcoxon signed-rank, Bonferroni.
//! - [`transfer`]: splits, pretraining, transfer learning, experiments, reports.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod nnet;
pub mod phantom;
pub mod tiling;
pub mod transfer;
pub mod volio;

pub use error::{Error, Result};
