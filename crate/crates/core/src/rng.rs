//! Hierarchical random streams.
//!
//! Every stochastic operation receives its own stream derived from a parent
//! seed and a path of integer tags (cycle, mode, step, sample, ...). Results
//! therefore never depend on evaluation order, which keeps parallel rollouts
//! bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Concrete generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamSeed(pub u64);

impl StreamSeed {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    /// Derives an independent child stream identified by `tag`.
    pub fn child(self, tag: u64) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    /// Shorthand for a chain of [`StreamSeed::child`] calls.
    pub fn path(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |s, &t| s.child(t))
    }

    pub fn rng(self) -> SimRng {
        SimRng::seed_from_u64(self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags used by the planners and the simulator.
pub mod tags {
    pub const WORLD: u64 = 1;
    pub const PLANNER: u64 = 2;
    pub const PRIOR_PARTICLES: u64 = 3;
    pub const INSTANCE: u64 = 4;

    pub const RESAMPLE: u64 = 10;
    pub const ROLLOUT_NOISE: u64 = 11;
    pub const SOLVER: u64 = 12;

    pub const MODE_PRIOR: u64 = 20;
    pub const LEVEL: u64 = 21;
    pub const DENOISE: u64 = 22;
}
