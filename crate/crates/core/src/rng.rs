//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
///
/// Work items that draw randomness derive their stream from `(seed, index)`
/// so results do not depend on the order in which items are processed.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used by the different consumers of one run seed.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const DATASET: u64 = 3;
    /// Augmentation streams are `AUGMENT_BASE + global sample index`.
    pub const AUGMENT_BASE: u64 = 1 << 32;
}
