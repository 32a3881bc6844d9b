//! Seeded RNG streams.
//!
//! Every stochastic component draws from its own stream derived from the
//! master seed, so adding or removing one consumer (e.g. the attacker's
//! shadow sampling) never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Weight initialization of the shared model.
    ModelInit,
    /// Dataset synthesis (client-side task data).
    TaskData,
    /// Dataset partitioning into shards and pools.
    Partition,
    /// Batch selection during training.
    Batches,
    /// Shadow model init and attacker-side sampling.
    Attacker,
    /// Evaluation-time noise (random baseline).
    EvalNoise,
    /// Attacker-pool synthesis when drawn from a separate generator.
    AttackerData,
    /// Held-out evaluation dataset synthesis.
    TestData,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ModelInit => 0x01,
            Stream::TaskData => 0x02,
            Stream::Partition => 0x03,
            Stream::Batches => 0x04,
            Stream::Attacker => 0x05,
            Stream::EvalNoise => 0x06,
            Stream::AttackerData => 0x07,
            Stream::TestData => 0x08,
        }
    }
}

/// Derive the stream RNG for `(seed, stream)` via splitmix64 mixing.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream.tag()))
}

fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
