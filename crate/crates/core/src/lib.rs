//! Instance-comparison training for a small two-stage object detector.
//!
//! The crate couples a desk-scale Faster-R-CNN-style detector with two
//! supervised contrastive losses — an RoI-level comparison against
//! ground-truth (and jittered ground-truth) embeddings, and a class-level
//! comparison against a confidence-gated, class-balanced memory bank of
//! historical embeddings — plus a synthetic imbalanced dataset generator and
//! a COCO-style per-class AP/AR evaluator, so every mechanism is verifiable
//! end to end on one machine.
//!
//! Start with the runnable demos in `examples/` (one per capability), or the
//! `instcomp` binary for dataset generation, training, evaluation, and
//! ablation sweeps.

pub mod contrast;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod data;
pub mod detector;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
