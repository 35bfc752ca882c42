//! Named random streams derived from one 64-bit seed.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

pub type Rng = SplitMix64;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// An independent splitmix64 stream for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> Rng {
    SplitMix64::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Child seed for a named component, so a whole pipeline hangs off one root seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(seed, name).next_u64()
}
