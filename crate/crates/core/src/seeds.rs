//! Deterministic derivation of sub-seeds from a run seed.
//!
//! Every random decision in the pipeline draws from its own ChaCha8 stream
//! whose seed is mixed from the run seed plus a purpose tag, so results do
//! not depend on call order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a base seed, a purpose tag, and an index.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix64(base);
    for b in tag.as_bytes() {
        h = mix64(h ^ u64::from(*b));
    }
    mix64(h ^ index)
}

/// Seeded deterministic generator for a (base, tag, index) triple.
pub fn rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, index))
}
