//! End-to-end pipeline for pulling tumor staging fields out of pathology
//! report text with a small, fully deterministic ML stack.
//!
//! The crate is organized as a chain of independent stages:
//!
//! * [`corpus`] — synthetic report generation, stratified splitting, JSONL I/O.
//! * [`symbolic`] — rule-based segmentation, de-identification, label
//!   extraction, hint mining, and a deliberately naive first-match baseline.
//! * [`prompt`] — anchor-window slicing, four-block prompt rendering, and a
//!   word-level tokenizer with a frozen reserved-id layout.
//! * [`model`] — a pre-norm causal transformer encoder with swappable
//!   parameter-efficient adapters (LoRA, elementwise rescaling, prefix
//!   embeddings) plus per-task linear heads, with hand-written backprop.
//! * [`train`] — AdamW with decoupled weight decay, warmup + cosine schedule,
//!   gradient accumulation, and early stopping with best-checkpoint restore.
//! * [`eval`] — per-task metrics (accuracy, macro F1, macro one-vs-rest
//!   AUROC, confusion matrices) and the scripted experiment arms.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); `f64` is
//! the default everywhere correctness is asserted. All randomness flows from
//! explicit `u64` seeds through ChaCha streams, so every artifact the crate
//! writes is byte-reproducible.

pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod scalar;
pub mod symbolic;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision parameter store (the default for tests and experiments).
pub type ParameterStore64 = model::ParameterStore<f64>;
/// Single-precision parameter store for memory-constrained runs.
pub type ParameterStore32 = model::ParameterStore<f32>;
/// Double-precision per-task prediction bundle.
pub type TaskPrediction64 = model::TaskPrediction<f64>;
/// Single-precision per-task prediction bundle.
pub type TaskPrediction32 = model::TaskPrediction<f32>;
