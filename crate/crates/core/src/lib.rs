//! Deterministic simulator for graph federated learning with spectral
//! polynomial filters and optimized client collaboration graphs.
//!
//! Each client holds a subgraph and trains a filter that mixes homophily
//! bases (propagation powers) with heterophily bases (fixed-angle unit
//! bases). The coordinator sees only SVD signatures of those bases, solves
//! one collaboration problem per basis order plus one for the classifier,
//! and aggregates parameters with the resulting row-stochastic weights.

pub mod analysis;
pub mod basis;
pub mod collab;
pub mod csbm;
pub mod error;
pub mod fedrun;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod rng;
pub mod svd;

pub use error::{Error, Result};
