//! Desk-scale orchestration and learning machinery for a multimodal agent
//! that drives backend visual specialists from a central decision model.
//!
//! The crate covers four areas:
//!
//! * [`protocol`] — the structured invocation format emitted by the decision
//!   model (`<Module> .. </Module>` blocks) and the textual grounding formats
//!   for boxes, frame spans and grounded captions.
//! * [`geometry`] / [`region`] — binary masks, IoU-family evaluation metrics
//!   and mask-conditioned feature pooling.
//! * [`signal`] / [`synergy`] / [`align`] — the continuous half of message
//!   passing: split signal embeddings, projection layers, decoder-alignment
//!   losses, and adversarial cross-task synergy training with a gradient
//!   reversal layer.
//! * [`dispatch`] / [`datagen`] / [`pipeline`] — the specialist registry,
//!   simulated backends, routing, instruction-data generation and the staged
//!   training pipeline with deterministic artifacts.

pub mod align;
pub mod artifacts;
pub mod config;
pub mod datagen;
pub mod dispatch;
pub mod geometry;
pub mod linalg;
pub mod pipeline;
pub mod protocol;
pub mod region;
pub mod signal;
pub mod synergy;
