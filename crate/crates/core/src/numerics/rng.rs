//! Seed handling. Every stochastic component takes an explicit RNG; child
//! streams are derived by hashing a label into the parent seed, so adding a
//! new consumer never shifts the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Child seed for the stream named `label`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ splitmix64(fnv1a(label.as_bytes())))
}

/// Child seed for an indexed stream (per step, per architecture, ...).
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(parent, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn child(parent: u64, label: &str) -> Rng64 {
    seeded(derive_seed(parent, label))
}
