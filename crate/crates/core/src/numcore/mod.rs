//! Dense tensors, reverse-mode differentiation and optimisation.

mod element;
pub mod graph;
pub mod kernels;
mod optim;
mod tensor;
pub mod cswt;
pub mod gradcheck;

pub use cswt::WeightFile;
pub use element::Element;
pub use graph::{BatchNormState, Graph, NormMode, OpKind, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

/// Seeded RNG used across the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
