//! Cell tokenization, the classifier built on a block stack, its loss, and
//! checkpoints.

mod checkpoint;
mod classifier;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use classifier::{
    cross_entropy_loss, sinusoidal_positions, tokenize_cell, CellTokenBatch, ClassifierHead, ClassifierOutput,
    UamClassifier,
};
