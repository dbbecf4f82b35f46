//! Dense matrices, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod matrix;
mod tape;

pub use adam::AdamState;
pub use matrix::{cosine_similarity, Matrix};
pub use tape::{softmax, Tape, Var};


/// Guard used when normalizing rows that might be all zeros.
pub const NORM_EPS: f64 = 1e-12;
