//! Seeded RNG construction.
//!
//! Every randomized operation in this crate takes an explicit generator, so
//! callers control reproducibility. ChaCha8 is used throughout: it is fast,
//! platform-independent, and supports independent streams, which keeps
//! resample/worker results invariant to scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for a top-level seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for subtask `index` under `seed`.
///
/// Each (seed, index) pair selects an independent stream, so subtasks can
/// run in any order or in parallel and still draw identical values.
pub fn rng_for_index(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
