//! Deterministic random streams keyed by integer coordinates.
//!
//! Every consumer of randomness (layer init, shuffles, attack starts) draws
//! from its own generator seeded by a hash of the coordinates that identify
//! it, such as `(seed, epoch, batch, sample)`. Streams therefore never depend
//! on how work is split across threads, and resuming a run only needs the
//! master seed and the epoch counter.

use rand::SeedableRng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a coordinate tuple into a single seed. Order matters.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x2545_F491_4F6C_DD1D, |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream<R: SeedableRng>(parts: &[u64]) -> R {
    R::seed_from_u64(derive_seed(parts))
}
