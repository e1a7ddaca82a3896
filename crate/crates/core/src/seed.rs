//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a fixed
//! tuple of small integers (a stream tag followed by indices such as client
//! id, round and epoch). The tuple is folded through SplitMix64, so streams
//! never depend on how many draws another stream has consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract.
pub mod stream {
    pub const DATA_MEANS: u64 = 1;
    pub const DATA_TRAIN: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const SHARDS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const FINETUNE: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from the master seed and a key path.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Seeded generator for the stream identified by `path`.
pub fn rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, path))
}
