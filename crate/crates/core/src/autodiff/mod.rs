//! Tape-based reverse-mode differentiation over dense `f64` tensors.

mod conv;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{Binding, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
