//! Communication-efficient federated learning over wireless edge networks.
//!
//! The crate simulates a quantized, variance-reduced federated protocol
//! (`fedqvr`), its wireless-aware variant with joint bandwidth and bit
//! allocation (`fedqvr-e`), and the FedAvg / SCAFFOLD baselines. Every
//! numeric building block is paired with an independent oracle in the test
//! suites.
//!
//! Module map:
//! - [`quantizer`]: stochastic uniform quantization and payload accounting.
//! - [`learner`]: logistic / MLP models over a flat parameter vector.
//! - [`data`]: MNIST IDX ingestion, synthetic tasks, label-shard partitioning.
//! - [`fed`]: protocol state machines and round orchestration.
//! - [`wireless`]: FDMA uplink channel model.
//! - [`alloc`]: alpha-fair bandwidth / bit allocation.
//! - [`harness`]: experiment configuration, metrics and CLI plumbing.

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod learner;
pub mod quantizer;
pub mod rng;
pub mod wireless;

pub use error::{Error, Result};
