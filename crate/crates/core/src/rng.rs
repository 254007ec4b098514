//! Deterministic stream derivation.
//!
//! Every random quantity in a run is drawn from its own ChaCha stream whose
//! seed is a hash of the master seed and a tag path (replication, purpose,
//! epoch, queue). Streams never share state, so results do not depend on
//! evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod tag {
    pub const REPLICATION: u64 = 0x5245_504c;
    pub const LEVELS: u64 = 0x4c45_564c;
    pub const INIT: u64 = 0x494e_4954;
    pub const POLICY: u64 = 0x504f_4c49;
    pub const AGENTS: u64 = 0x4147_4e54;
    pub const QUEUES: u64 = 0x5155_4555;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const EVAL: u64 = 0x4556_414c;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hashes a base seed and a tag path into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, path))
}

/// Seed of replication `index` under a master seed.
pub fn replication_seed(master: u64, index: u64) -> u64 {
    derive_seed(master, &[tag::REPLICATION, index])
}
