use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Portable, reproducible generator used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derived seed for `(seed, key)`.
pub fn mix(seed: u64, key: u64) -> u64 {
    splitmix(splitmix(seed) ^ splitmix(key.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Independent stream keyed by `(seed, keys...)`, e.g. `(seed, run, iteration)`.
pub fn substream(seed: u64, keys: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ splitmix(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    seeded(h)
}

/// Child generator derived from (and advancing) a parent.
pub fn split(parent: &mut Rng) -> Rng {
    seeded(parent.next_u64())
}
