//! Seeded random streams.
//!
//! Every random decision in a run draws from its own ChaCha stream whose seed is
//! a hash of the master seed and a tuple of tags (purpose, cycle, round, client).
//! Streams never depend on execution order, so client updates can run on any
//! number of workers and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Tags naming what a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Partition = 1,
    LabelSplit = 2,
    ModelInit = 3,
    ClientSelection = 4,
    LocalUpdate = 5,
    Acquisition = 6,
    Data = 7,
    Shuffle = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with an ordered list of tags into a 64-bit stream seed.
pub fn derive_seed(seed: u64, purpose: Purpose, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6B61_6661_6C00_0000);
    h = splitmix64(h ^ purpose as u64);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, tags))
}
