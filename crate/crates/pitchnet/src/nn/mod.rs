//! Minimal reverse-mode autodiff substrate: tensors, a flat op tape, Adam.

pub mod adam;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, Moments};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
