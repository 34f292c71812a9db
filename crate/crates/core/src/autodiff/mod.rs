//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Values are recorded on a [`Tape`] as the forward pass executes; a single
//! reverse sweep from a scalar loss fills gradients of every leaf that asked
//! for one. Model parameters live in a [`ParamStore`] and are copied onto the
//! tape per forward pass.

mod kernels;
mod tape;
mod tensor;

pub use tape::{BinaryOp, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
