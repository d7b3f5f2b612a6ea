//! Counter-based random substreams.
//!
//! Every stochastic operation takes an explicit [`Stream`]. A stream is keyed
//! by `(master seed, replicate, lane)` and maps onto an independent ChaCha
//! stream, so results never depend on scheduling or on how many replicates
//! were drawn before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Disjoint lanes within one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Lane {
    Locations = 0,
    Field = 1,
    RandomEffect = 2,
    SamplingError = 3,
    Folds = 4,
    Scenario = 5,
    Population = 6,
    Sample = 7,
    Pairs = 8,
    Auxiliary = 9,
}

const LANES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    pub master: u64,
    pub replicate: u64,
    pub lane: Lane,
}

impl Stream {
    pub fn new(master: u64, replicate: u64, lane: Lane) -> Self {
        Self {
            master,
            replicate,
            lane,
        }
    }

    /// Same replicate, different lane.
    pub fn with_lane(self, lane: Lane) -> Self {
        Self { lane, ..self }
    }

    /// Derives a child key; used when one operation needs several sub-streams
    /// (e.g. outer Monte Carlo repetitions that each run a full bootstrap).
    pub fn child_seed(self, salt: u64) -> u64 {
        splitmix64(
            self.master
                ^ splitmix64(self.replicate.wrapping_mul(LANES) + self.lane as u64)
                ^ splitmix64(salt.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        )
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.replicate.wrapping_mul(LANES) + self.lane as u64);
        rng
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash for string keys (region ids).
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
