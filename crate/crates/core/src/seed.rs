//! Counter-based seed derivation.
//!
//! Every random draw in the crate is keyed on the user seed plus a tuple of
//! stable identifiers, so results do not depend on evaluation order or
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of keys into a new 64-bit seed.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stage tags used to fan one user seed out to independent pipeline stages.
pub mod stage {
    pub const SAMPLING: u64 = 0x5341_4d50;
    pub const SYMNMF: u64 = 0x4e4d_4600;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const OCCLUSION: u64 = 0x4f43_434c;
}

pub fn rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, keys))
}

/// A uniform draw in `(0, 1]` that is a pure function of `(seed, keys)`.
pub fn unit_open_closed(seed: u64, keys: &[u64]) -> f64 {
    let bits = derive(seed, keys) >> 11;
    (bits as f64 + 1.0) / (1u64 << 53) as f64
}
