//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.

pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{AdamConfig, AdamState};
pub use rng::{derive_seed, seeded, Rng64};
pub use tape::{gelu_scalar, softmax_slice, Tape, Var};
pub use tensor::Tensor;
