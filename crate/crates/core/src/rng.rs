//! Seed derivation for independent, schedule-free random streams.
//!
//! Every consumer of randomness (client sampling, a client's mini-batches in
//! a given round, channel fading of a device in a round, ...) gets its own
//! ChaCha stream keyed by the master seed and a tuple of tags. Results thus
//! never depend on the order in which workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes. Kept as explicit constants so traces stay comparable
/// across algorithms that share a seed.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SAMPLE_CLIENTS: u64 = 2;
    pub const LOCAL_STEPS: u64 = 3;
    pub const MINIBATCH: u64 = 4;
    pub const QUANTIZE: u64 = 5;
    pub const PLACEMENT: u64 = 6;
    pub const FADING: u64 = 7;
    pub const DATA: u64 = 8;
    pub const PARTITION: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a list of tags into a 64-bit sub-seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(master: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, tags))
}
