//! Embedding layers, stacking, residual units and the scoring layer.
//!
//! The Deep Crossing style network here is trained only to initialize the
//! embedding parameters; downstream stages use [`Embedder`] alone.

mod checkpoint;
mod embed;
mod residual;
mod stacked;
pub mod tensorfile;
mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use embed::{embed_forward, stack, EmbeddingLayer, Embedder, StackingVector};
pub use residual::{residual_forward, ResidualUnit};
pub use stacked::{extract_stacking, parse_stacked, write_stacked, StackedDataset};
pub use train::{train_deep_crossing, train_from, ArchConfig, DeepCrossingModel, TrainConfig, TrainReport};

use crate::numfmt::sigmoid;

/// Probability clamp applied at the loss boundary.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(
        "loss became non-finite at epoch {epoch}, batch {batch} (learning_rate = {learning_rate}); \
         lower the learning rate or add l2"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `sigmoid(w·x + b)` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn score(x: &[f64], w: &[f64], b: f64) -> f64 {
    assert_eq!(x.len(), w.len(), "scoring width mismatch");
    let s: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
    sigmoid(s).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn log_loss(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean log loss of raw scores against labels, clamping probabilities.
pub fn mean_log_loss_raw(raw: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(raw.len(), labels.len());
    if raw.is_empty() {
        return 0.0;
    }
    raw.iter()
        .zip(labels)
        .map(|(&r, &y)| log_loss(sigmoid(r).clamp(PROB_EPS, 1.0 - PROB_EPS), y))
        .sum::<f64>()
        / raw.len() as f64
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}
