//! Deterministic per-rollout random streams.
//!
//! Every rollout draws from its own ChaCha stream whose seed is a hash of a
//! small tuple of integers, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes, mixed into the seed so train, eval and probe draws never
/// share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Suite = 1,
    QueryPick = 2,
    TrainRollout = 3,
    EvalRollout = 4,
    Probe = 5,
    Theory = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds `parts` into a single 64-bit seed.
pub fn mix_seed(seed: u64, purpose: Purpose, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ (purpose as u64).rotate_left(32));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, purpose, parts))
}
