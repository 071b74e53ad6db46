//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8, a counter-based generator
//! whose output is fixed by (seed, stream, word position) on every platform.
//! Independent consumers (one patient, one fold, one epoch) get their own
//! stream id so that adding or reordering consumers never perturbs others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same seed apart.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Purpose {
    Synth = 1,
    Folds = 2,
    Init = 3,
    Shuffle = 4,
    Bootstrap = 5,
    LabelPermutation = 6,
    Strata = 7,
}

/// A generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
