//! Federated mixture-of-experts simulator.
//!
//! A frozen common expert embeds every client's data once; a small gate
//! network scores the experts from those embeddings and each round only the
//! top-K experts travel to a client. Anchor clients, pinned one-to-one to an
//! expert, train that expert and teach the gate which expert they belong to.
//! Baselines (FedAvg, FedProx, averaged ensembles, an all-experts mixture)
//! share the same plumbing and accounting.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gating;
pub mod metrics;
pub mod nn;
pub mod runtime;
pub mod seed;
#[cfg(test)]
mod testkit;

pub use error::{Error, Result};
