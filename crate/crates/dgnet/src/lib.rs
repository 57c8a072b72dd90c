//! dgnet — a desk-scale dynamic graph network engine.
//!
//! Each stage of the network is a directed acyclic graph over convolutional
//! node blocks. Per-node *routers* (global pooling → affine map → sigmoid)
//! generate instance-aware weights for the node's output edges, so every
//! sample flows through its own effective sub-graph of the complete stage
//! graph. A batched adjacency buffer records the per-sample edge weights
//! during the forward pass and carries gradients back into the routers.
//!
//! The crate is organised along the moving parts:
//!
//! * [`tensor`] — dense N-d arrays plus a reverse-mode differentiation tape
//! * [`graph`] — stage-graph construction, validation, DOT/CSV export
//! * [`routing`] — router evaluation and threshold policies
//! * [`buffer`] — the batched adjacency-matrix buffer
//! * [`model`] — node blocks, stages, static/dynamic forward, pruning, cost
//! * [`data`] — synthetic datasets and the CIFAR-10 binary loader
//! * [`train`] — SGD with momentum, cosine schedule, checkpoints, metrics
//! * [`config`] — declarative run configuration (TOML)
//! * [`experiments`] — train/eval/ablation/comparison orchestration

pub mod buffer;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod model;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{DgError, Result};
