//! Dense `f64` matrices and a reverse-mode autodiff tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds an [`Rng`]; distinct `stream`s give independent sequences for the same seed.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
