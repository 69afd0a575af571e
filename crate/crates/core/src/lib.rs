//! Federated-learning simulation laboratory centred on bandit-allocated fair
//! aggregation (FedMABA).
//!
//! The server keeps a persistent weight vector `p` over clients. Every round
//! the sampled clients' reported losses drive a mirror-ascent step on `p`
//! that is projected back onto a KL ball around the uniform distribution,
//! and the projected weights are blended with plain averaging to form the
//! server update.
//!
//! Module map:
//! - [`allocator`]: dual step, constraint kernel, multiplier search, projection.
//! - [`engine`]: client sampling, local SGD, aggregation strategies, rounds.
//! - [`models`]: softmax regression and a two-layer MLP with manual gradients.
//! - [`data`]: synthetic clusters, shard / Dirichlet partitioning, IDX files.
//! - [`metrics`]: fairness variance, tail means, divergences, bound terms.
//! - [`theory`]: independent oracles and diagnostics.
//! - [`runner`]: configuration, experiment grid, persistence, plot data.

// `!(x > 0.0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod runner;
pub mod theory;

pub use error::{Error, Result};
