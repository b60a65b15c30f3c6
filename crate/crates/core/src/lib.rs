//! Latency-aware architecture search over sparsely activated transformer
//! blocks.
//!
//! The pipeline has two phases. Phase 1 trains a supernet whose slots mix
//! every candidate block through Gumbel-softmax architecture weights while a
//! gated latency penalty steers the mixture toward a latency target. Phase 2
//! takes the per-slot argmax, builds that network from scratch and retrains
//! it with an expert load-balancing loss.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod finalize;
pub mod graph;
pub mod gumbel;
pub mod io;
pub mod latency;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod params;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use rng::{streams, RngStream, RngState};
pub use tensor::Tensor;
