//! Dual-space hierarchical learning (DHL) for goal-guided conversational
//! recommendation: multi-level goal-sequence prediction with cross-attention
//! representation sharing, adjacency-based logit fusion, bi-level hierarchical
//! loss reweighting, and soft-label guidance toward a final recommendation goal.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`tensor`] — dense `f64` tensors with a reverse-mode autodiff tape
//! * [`data`] — goal vocabularies, dialog records, adjacency matrices,
//!   prefix expansion, and a seeded synthetic corpus generator
//! * [`model`] — the DHL network: per-level LSTMs, cross attention,
//!   adjacency logit fusion, soft labels, and per-level losses
//! * [`train`] — Adam with cosine decay, the hierarchical weight network,
//!   and the bi-level (inner/outer) training loop
//! * [`metrics`] — accuracy, macro precision/recall/F1, and the
//!   dialog-leading success rate
//! * [`checkpoint`] — bit-exact binary persistence of parameters, weight-net,
//!   optimizer state, and configuration
//! * [`gradcheck`] — the finite-difference verification harness

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use data::{AdjacencyMatrix, DialogRecord, GoalHierarchyDataset, GoalVocabulary, TrainingInstance};
pub use model::{DhlModelParams, ForwardTrace, ModelConfig};
pub use tensor::{Tape, Tensor, TensorError};
pub use train::{TrainConfig, TrainMode, WeightNet};
