//! Tensor backend: storage, differentiable ops, reverse-mode gradients,
//! Adam, and the deterministic RNG everything is seeded from.

mod adam;
mod autodiff;
mod ops;
mod rng;
mod tensor;

pub use adam::{AdamParams, AdamState, Moments};
pub use ops::ResizeDir;
pub use rng::SeededRng;
pub use tensor::{Real, Shape, Tensor, TensorError};
