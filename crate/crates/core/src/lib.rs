//! Subgroup-aware knowledge distillation.
//!
//! A small laboratory for studying how distillation redistributes accuracy
//! across classes and subgroups: feed-forward teacher and student models,
//! the standard and adaptive distillation objectives, variable-margin losses,
//! per-class temperatures, and worst-group metrics with logit diagnostics.

pub mod adaptive;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`; distinct streams are independent.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
