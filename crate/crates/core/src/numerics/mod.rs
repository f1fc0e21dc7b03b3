//! Dense `f32` tensors, a reverse-mode tape, optimizers and the checkpoint format.

pub mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{sgd_step, Adam, Optimizer, OptimizerKind};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{gelu, gelu_grad, softmax_in_place, CombineTerm, GateWeight, Tape, Var};
pub use tensor::Tensor;

/// The crate-wide PRNG: ChaCha8 seeded from a 64-bit value.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
