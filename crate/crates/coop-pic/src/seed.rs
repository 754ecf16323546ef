//! Deterministic derivation of per-task RNG substreams.
//!
//! A single 64-bit scenario seed is expanded into independent streams keyed
//! by (trial, cycle, agent, rollout) so that results are reproducible no
//! matter how work is scheduled across threads.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

const TAG_TRIAL: u64 = 0x7472_6961_6c00_0001;
const TAG_ROLLOUT: u64 = 0x726f_6c6c_6f75_7401;
const TAG_WORLD: u64 = 0x776f_726c_6400_0001;
const TAG_ORACLE: u64 = 0x6f72_6163_6c65_0001;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable mixing of a seed with a sequence of domain words.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &w in words {
        acc = splitmix64(acc ^ w);
    }
    acc
}

/// Seed for trial `trial` derived from the scenario base seed.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    mix(base, &[TAG_TRIAL, trial as u64])
}

/// Stream driving the rollout `y` sampled by agent `agent` in cycle `cycle`.
/// This is keyed per sampling agent, not per subsystem: an agent samples its
/// local paths once per cycle and every subsystem containing it sees the
/// same paths.
pub fn rollout_stream(trial_seed: u64, cycle: usize, agent: usize, y: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(
        trial_seed,
        &[TAG_ROLLOUT, cycle as u64, agent as u64, y as u64],
    ))
}

/// Stream driving the true world advance for `agent` in cycle `cycle`.
pub fn world_stream(trial_seed: u64, cycle: usize, agent: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(trial_seed, &[TAG_WORLD, cycle as u64, agent as u64]))
}

/// Stream for validation oracles, keyed by sample index.
pub fn oracle_stream(seed: u64, sample: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, &[TAG_ORACLE, sample as u64]))
}
