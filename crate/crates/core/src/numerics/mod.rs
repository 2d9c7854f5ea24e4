//! Dense tensors, reverse-mode differentiation and the optimizer.

mod gemm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::AdamWState;
pub use params::{trunc_normal, xavier_uniform, Param, ParamGrads, ParamId, ParamStore};
pub use tape::{gelu_scalar, sigmoid, Gradients, Tape, Var, GELU_CUBIC};
pub use tensor::Tensor;

