//! Loosely coupled federated learning.
//!
//! Clients pre-train arbitrary classifiers and fit data generators on their
//! private shards, then upload both once. The server samples artificial
//! examples from the generators, scores each one with the multi-party
//! multi-class margin, and forwards margin violations to the most confident
//! correct and incorrect models for retraining. Clients download their
//! updated models and fine-tune locally. FedAvg and FedProx are included as
//! aggregation-based baselines.

pub mod baselines;
pub mod codec;
pub mod data;
pub mod error;
pub mod generators;
pub mod margin;
pub mod models;
pub mod par;
pub mod rng;
pub mod scenario;
pub mod server;

pub use error::{LcflError, Result};
