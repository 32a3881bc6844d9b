//! Deterministic split-learning simulator and attack bench.
//!
//! The crate provides a small `f64` neural-network engine, a three-segment
//! split-learning protocol with byte-level message traces, a malicious-server
//! shadow-training stage, an intermediate-output adversarial attack, and the
//! probes and experiment harness used to study them.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod network;
pub mod optim;
pub mod probes;
pub mod report;
pub mod rng;
pub mod shadow;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::Layer;
pub use network::{ActivationTrace, Network};
pub use tensor::Tensor;
