//! Tensor math, reverse-mode autodiff, layer primitives and the optimizer.

pub mod init;
pub(crate) mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{adam_step, Adam};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{bce_value, BackwardFault, Gradients, Mode, OpKind, Tape, Var, BCE_EPS};
pub use tensor::{Shape, Tensor};
