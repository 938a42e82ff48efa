//! Independent RNG streams keyed by `(seed, tag, index, ...)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` and a path of keys. Distinct paths give statistically
/// independent streams; the same path always gives the same stream.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub mod tag {
    pub const SYNTH: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const GENERATE: u64 = 6;
    pub const HUTCHINSON: u64 = 7;
    pub const VALIDATE: u64 = 8;
    pub const METRICS: u64 = 9;
}
