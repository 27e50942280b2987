//! Deep Embedding Forest toolkit.
//!
//! A model is trained in stages: per-group neural embeddings are learned by a
//! residual network ([`nn`]), the embeddings are frozen and a gradient-boosted
//! forest is fit on the resulting stacking vectors ([`gbdt`]), and optionally
//! the embeddings and forest are refined jointly through a differentiable
//! one-dimensional relaxation of every split ([`fuzzy`]). Serving ([`serve`])
//! runs the embedding layers followed by a hard traversal of the forest, so
//! forest cost depends on tree count and depth but not on the stacking width.
//!
//! [`cli`] wires the stages into file-based commands.

pub mod cli;
pub mod data;
pub mod fuzzy;
pub mod gbdt;
pub mod nn;
pub mod optim;
pub mod serve;
pub mod tally;

mod numfmt;

pub use data::{Dataset, FeatureGroup, FeatureSchema, Field, GroupKind, Sample, SparseVector};
pub use nn::{DeepCrossingModel, Embedder, StackedDataset};
pub use fuzzy::FuzzyForest;
pub use gbdt::{Forest, Node, Tree};
pub use serve::{ModelBundle, Predictor};
