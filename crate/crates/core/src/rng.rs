//! Seeded randomness.
//!
//! All randomness in the crate comes from ChaCha8 (a counter-based stream
//! cipher generator) seeded with a 64-bit value, so every shuffle, weight
//! and synthetic cloud is reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
