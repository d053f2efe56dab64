//! Deterministic random streams.
//!
//! Every stochastic step is keyed by a seed and a stream number so results do
//! not depend on thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for an independent child generator, e.g. one per data row.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, index).next_u64()
}
