//! Novel class discovery with self-cooperation knowledge distillation.
//!
//! A small encoder feeds two disjoint classification heads: a linear head
//! over the known (labeled) classes and an MLP head over the novel
//! (unlabeled) classes. During the discovery stage every sample in a batch
//! contributes to both heads through a cross-space similarity matrix:
//! labeled samples synthesize soft targets for the novel head on unlabeled
//! samples, and unlabeled samples synthesize soft targets for the known head
//! on labeled samples.
//!
//! Module map:
//!
//! * [`numerics`]: dense matrices, softmax, KL divergence, cosine similarity,
//!   finite-difference gradients.
//! * [`data`]: synthetic and CSV datasets, proportional batch sampling,
//!   jitter augmentation.
//! * [`model`]: encoder, frozen replica encoder, known/novel heads.
//! * [`sckd`]: similarity scores, pseudo-label synthesis, distillation losses.
//! * [`objective`]: Sinkhorn-Knopp targets, cross-entropy, SGD, learning-rate
//!   schedule and the two training stages.
//! * [`eval`]: Hungarian matching, clustering accuracy, NMI, ARI and the
//!   task-aware / task-agnostic protocols.
//! * [`experiment`]: configuration, multi-seed runs, sweeps, embeddings.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod sckd;

pub use error::{Error, Result};
pub use numerics::Matrix;
