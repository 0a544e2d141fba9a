//! Desk-scale laboratory for weakly supervised audio-visual video parsing.
//!
//! The crate covers the full pipeline on synthetic corpora:
//!
//! - [`tensor`]: f64 tensors, a reverse-mode tape, AdamW, LR scheduling.
//! - [`model`]: the hybrid cross-modal attention network with attentive
//!   multiple-instance pooling over segments and modalities.
//! - [`labels`]: weak video labels, teacher logits, threshold calibration,
//!   and elaboration of weak labels into dense per-segment pseudo labels.
//! - [`train`]: loss construction (video-level, guided, distillation, dense)
//!   and the deterministic training loop.
//! - [`metrics`]: the segment- and event-level evaluation protocol plus
//!   cross-modal alignment diagnostics.
//! - [`corpus`]: on-disk corpus layout and the synthetic corpus generator.
//!
//! Everything is seed-deterministic: identical inputs, seeds, and
//! configuration produce bit-identical artifacts.

pub mod corpus;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
