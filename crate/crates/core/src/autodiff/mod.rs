//! Minimal deterministic reverse-mode differentiation in `f64`.
//!
//! Graphs are recorded on a [`Tape`]; parameters live in [`ParamGroup`]s and
//! are bound to a tape per forward pass. Two controls route gradients:
//! [`Tape::detach`] cuts a path, [`zero_grad_group`] wipes what a group has
//! collected so far.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{sgd_step, zero_grad_group, ParamGroup, Parameter, Sgd};
pub use tape::{ParamKey, Tape, Var};
pub use tensor::Tensor;
