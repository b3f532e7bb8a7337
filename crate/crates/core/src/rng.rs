//! Seed derivation. Every random decision draws from a ChaCha stream chosen
//! by `(seed, purpose, index...)`, never from shared mutable RNG state, so
//! results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
#[repr(u8)]
pub enum Purpose {
    SymptomMap = 1,
    Record = 2,
    Split = 3,
    Permute = 4,
    EpochOrder = 5,
    ModelInit = 6,
    AdapterInit = 7,
    Sampling = 8,
}

/// RNG for `(seed, purpose, a, b)`; `a` gets 32 bits and `b` 24 bits of the
/// stream id.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    debug_assert!(a < 1 << 32 && b < 1 << 24);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (a << 24) | b);
    rng
}
