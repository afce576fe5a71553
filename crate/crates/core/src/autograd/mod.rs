//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every operation is recorded on a [`Tape`] in execution order; a reverse
//! sweep from a scalar root accumulates gradients into every node that
//! depends on a leaf created with `requires_grad`. [`Tape::ste`] is the
//! straight-through primitive: it forwards one tensor and routes the incoming
//! gradient to another.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::merge_rows_forward;
pub use tensor::Tensor;
