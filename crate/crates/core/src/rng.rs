//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a [`ChaCha8Rng`] seeded by
//! mixing the run seed with a purpose tag and the coordinates of the decision
//! (epoch, step, sample index, parameter name, ...). Deriving seeds
//! statelessly — instead of threading one generator through the program —
//! means any part of a run can be reproduced in isolation: the dropout mask
//! of epoch 7 step 3 does not depend on how many random draws happened
//! before it, so a run resumed from a checkpoint replays the exact stream
//! the uninterrupted run would have used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping independent random streams disjoint.
///
/// The values are arbitrary but fixed forever: changing them changes every
/// derived stream and therefore every seeded artifact.
pub mod tag {
    /// Parameter initialization (mixed with a parameter-name hash).
    pub const INIT: u64 = 0x01;
    /// Per-epoch shuffling of the training set.
    pub const SHUFFLE: u64 = 0x02;
    /// Dropout masks (mixed with epoch, step and sample index).
    pub const DROPOUT: u64 = 0x03;
    /// Synthetic scene generation (mixed with split tag and scene index).
    pub const SCENE: u64 = 0x04;
    /// Coordinate sampling in gradient checks.
    pub const GRADCHECK: u64 = 0x05;
    /// Subsampling of the training set under a patch budget.
    pub const SUBSET: u64 = 0x06;
}

/// Mixes a sequence of words into a single seed with splitmix64.
///
/// splitmix64 is a fixed, well-studied finalizer; using it keeps the
/// derivation portable and byte-stable across platforms and releases.
pub fn mix(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        h ^= splitmix64(w.wrapping_add(h));
        h = splitmix64(h);
    }
    h
}

/// A generator for the stream identified by the mixed words.
pub fn stream(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}

/// FNV-1a hash of a name, for name-keyed streams (parameter init).
///
/// Name-keyed derivation makes initialization structural: a parameter called
/// `"enc1.conv0.w"` receives the same initial values in every model variant
/// that contains it, regardless of which other parameters exist.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mix_is_order_sensitive() {
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
        assert_ne!(mix(&[1]), mix(&[1, 0]));
    }

    #[test]
    fn streams_are_reproducible_and_disjoint() {
        let a: f64 = stream(&[7, tag::DROPOUT, 0]).random();
        let b: f64 = stream(&[7, tag::DROPOUT, 0]).random();
        let c: f64 = stream(&[7, tag::DROPOUT, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn name_hash_matches_fnv1a_reference() {
        // Published FNV-1a test vector.
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(name_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }
}
