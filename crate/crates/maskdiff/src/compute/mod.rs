//! Minimal differentiable dense-array engine: tensors, forward ops,
//! reverse-mode tape and finite-difference gradient checking.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, LossFn};
pub use params::{ParamEntry, ParamSet};
pub use scalar::Scalar;
pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::Tensor;
