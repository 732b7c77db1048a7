//! Reverse-mode differentiation over the fixed set of operations the
//! registration network and loss need.

mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
