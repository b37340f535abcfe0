//! Learns a linear map from visual features into a frozen word-embedding
//! space, using entropic optimal-transport assignments over the vocabulary
//! as a shared target for both modalities.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod bridge;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
mod numeric;
pub mod ot;
pub mod toy;

pub use anchors::{estimate_marginal, load_anchor_space, TokenCounts, WordAnchorSpace};
pub use bridge::{pool, project, EmbeddingBatch, LinearBridge, PairedItem, PooledBatch, TrainConfig};
pub use error::{Error, Result};
pub use losses::{FrozenDecoder, LossConfig, Objective};
pub use ot::{assign_batch, sinkhorn, AssignmentMatrix, ScoreMatrix, SolverConfig};
