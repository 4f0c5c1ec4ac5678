//! Desk-scale simulator for supernet-based neural architecture search in a
//! federated system.
//!
//! The server owns an over-parameterized supernet `(w, alpha)` and, each
//! round, samples a sparse subnet for every client as a binary mask over the
//! operation slots. Clients prune channels to meet a resource budget, run a
//! bilevel local search on their own data, and send back masked parameter
//! deltas, which the server folds into the supernet as a sample-count-weighted
//! sum. The crate is organized along that pipeline:
//!
//! - [`searchspace`]: mask algebra and sparsity arithmetic
//! - [`sampling`]: per-round mask generation strategies
//! - [`micromodel`]: a small differentiable supernet with exact gradients
//! - [`federation`]: data partitioning, round orchestration, aggregation
//! - [`analysis`]: Hamming/overlap diagnostics and communication accounting
//! - [`dataio`]: synthetic dataset generators and simple loaders
//!
//! Everything is deterministic under a single master seed; see [`seeds`].

pub mod analysis;
pub mod dataio;
pub mod error;
pub mod federation;
pub mod micromodel;
pub mod sampling;
pub mod searchspace;
pub mod seeds;

pub use error::{Error, Result};
