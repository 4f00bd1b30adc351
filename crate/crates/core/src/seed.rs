//! Seed derivation.
//!
//! Every random stream is derived from the single run seed plus a path of
//! integers (round, client id, purpose tag) so that results do not depend on
//! the order in which parallel tasks run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const ANCHORS: u64 = 3;
    pub const TEST_CLIENTS: u64 = 4;
    pub const COMMON_INIT: u64 = 5;
    pub const COMMON_TRAIN: u64 = 6;
    pub const EXPERT_INIT: u64 = 7;
    pub const GATE_INIT: u64 = 8;
    pub const ROUND_PLAN: u64 = 9;
    pub const CLIENT: u64 = 10;
    pub const ENSEMBLE: u64 = 11;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(seed, parts))
}
