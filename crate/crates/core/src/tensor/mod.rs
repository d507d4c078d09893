//! Dense arrays and the reverse-mode autodiff graph used by every model op.

mod array;
mod graph;
pub(crate) mod kernels;

pub use array::{inverse_permutation, numel, strides, DenseArray};
pub use graph::{attention, bilinear_resample, resample, Activation, Graph, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every seeded draw (ChaCha with 8 rounds). Its
/// output stream is specified independently of platform and word size.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests;
