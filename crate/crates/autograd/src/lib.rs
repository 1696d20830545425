//! Minimal reverse-mode automatic differentiation for small dense models.
//!
//! Tensors are row-major `Vec`s, matrix products go through `matrixmultiply`,
//! and a [`Tape`] records one forward pass. Weights live in a [`ParamStore`]
//! and are shared with tapes by reference count, so a training step is:
//! build a tape, run the model, call [`Tape::backward`], update the store.

mod float;
mod params;
mod tape;
mod tensor;

pub use float::Float;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
