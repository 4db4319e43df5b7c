//! Dense `f64` tensors, reverse-mode differentiation, transformer blocks,
//! optimization and checkpoint IO.

pub mod checkpoint;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use nn::{attention, grad_check, BlockConfig, GradCheckReport, Init, Linear, TransformerBlock};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
