//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("box augmentation degenerate after {retries} sign redraws")]
    DegenerateAugmentation { retries: usize },

    #[error("cosine similarity undefined for zero-norm vector")]
    UndefinedSimilarity,

    #[error("contrastive comparison against an empty key set")]
    EmptyComparison,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class id {class_id} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: component {component} = {value}")]
    Divergence {
        step: usize,
        component: String,
        value: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
