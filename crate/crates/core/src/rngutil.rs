//! Counter-based seeded RNG streams.
//!
//! Every parallel unit of work (trajectory, bootstrap replicate, grid point)
//! gets its own ChaCha stream derived from `(base_seed, index)`. Streams are
//! independent of how work is partitioned across threads, which is what makes
//! experiment outputs reproducible under any worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64-style mixer; combines a seed with a salt into a fresh 64-bit seed.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for stream `idx` of the family identified by `seed`.
pub fn stream(seed: u64, idx: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}
