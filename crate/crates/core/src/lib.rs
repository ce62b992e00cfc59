//! Federated RF fingerprinting: signal synthesis, dense-connectivity
//! embedding networks, federated training with transfer-and-adaptation, and
//! nearest-centroid evaluation.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fed;
pub mod kv;
pub mod metric;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod signal;

pub use error::{Error, Result};
