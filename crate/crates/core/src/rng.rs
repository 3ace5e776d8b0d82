//! Seeded random streams.
//!
//! One master seed fans out into independent named substreams so that, for
//! instance, changing how many augmentation draws happen never shifts the
//! shuffling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Noise = 2,
    Augment = 3,
    Shuffle = 4,
    Kmeans = 5,
    Features = 6,
    Spurious = 7,
    Affinity = 8,
    Candidates = 9,
    LabelNoise = 10,
    Filter = 11,
}

/// Independent generator for `stream` under `seed`.
pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Derive a seed for a sub-task (e.g. an epoch's clustering) from a parent seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
