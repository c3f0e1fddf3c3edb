//! Reverse-mode automatic differentiation over small dense tensors.

mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{Optimizer, OptimizerKind};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{LinearMap, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::dot;
