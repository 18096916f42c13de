//! Path-derived seeds and identifiers.
//!
//! `hash64(seed, path)` chains SplitMix64 finalizers over the root seed and
//! each path index, so every node of the forest gets a seed that depends only
//! on the forest seed and its position. Build order therefore cannot change
//! the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Name recorded in forest manifests for [`hash64`].
pub const HASH_ALGORITHM: &str = "splitmix64-chain-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn derive(self, path: &[u32]) -> RngSeed {
        RngSeed(hash64(self.0, path))
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash64(seed: u64, path: &[u32]) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    // Length participates so that [] and [0] differ.
    h = mix(h ^ (path.len() as u64).wrapping_mul(GOLDEN));
    for &idx in path {
        h = mix(h.wrapping_add(GOLDEN) ^ u64::from(idx).wrapping_add(1).wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    h
}
