//! Seed derivation. Every stochastic stage draws from a ChaCha stream keyed by
//! a stable hash of (root seed, stage name, record id), so any stage can be
//! rerun in isolation and produce the same bytes on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the stage name, then mixed with the root and record id.
pub fn derive_seed(root: u64, stage: &str, record: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(root ^ h).wrapping_add(record))
}

pub fn rng_for(root: u64, stage: &str, record: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, stage, record))
}
