//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use params::{adam_step, AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Additive mask value for blocked attention positions.
pub const MASK_NEG: f64 = -1e30;
