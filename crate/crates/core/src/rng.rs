//! Stable seed derivation. Every random stream in a run is a pure function of the
//! global seed and a few integer coordinates (client, round, epoch, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

// stream tags
pub const TAG_PARTITION: u64 = 1;
pub const TAG_SPLIT: u64 = 2;
pub const TAG_BATCHES: u64 = 3;
pub const TAG_SEARCH: u64 = 4;
pub const TAG_INIT: u64 = 5;
pub const TAG_FINETUNE: u64 = 6;
