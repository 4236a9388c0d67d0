//! Seeded random number generation.
//!
//! Everything in this workspace that consumes randomness goes through
//! ChaCha8 keyed by a `u64` seed, so traces and reports reproduce
//! bit-for-bit across platforms and across runs.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// ChaCha8 generator keyed by `seed`.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// ChaCha8 generator keyed by `seed` on an independent stream.
///
/// Useful when a deterministic process needs randomness addressable by
/// index (e.g. per-epoch noise) without consuming a shared sequence.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
