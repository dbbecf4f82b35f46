//! Incomplete two-view clustering with learnable prototypes: dual
//! sample/prototype attention, contrastive training, prototype-based
//! imputation of missing views, and k-means on the completed
//! representations.

pub mod clustering;
pub mod data;
mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`. Distinct streams of one
/// seed are independent sequences.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream assignments, so that one run seed drives every consumer without
// two of them sharing a sequence.
pub(crate) const STREAM_SYNTHETIC: u64 = 0;
pub(crate) const STREAM_MISSING: u64 = 1;
pub(crate) const STREAM_MODEL_INIT: u64 = 2;
/// Offset by the epoch number.
pub(crate) const STREAM_BATCHES: u64 = 1 << 32;
/// Offset by the restart number.
pub(crate) const STREAM_KMEANS: u64 = 2 << 32;
