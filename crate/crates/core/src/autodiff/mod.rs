//! Minimal reverse-mode differentiation over dense f64 tensors.
//!
//! Supports exactly the operation set the equivariant network and its
//! losses need: matrix products, elementwise nonlinearities, masked
//! (segment) pooling, broadcasts, and fused cross-entropy. All arithmetic
//! is f64 so gradient checks can run at tight tolerances.

mod tape;
mod tensor;

pub use tape::{grad_check, Gradients, Tape, Var, BCE_EPS};
pub use tensor::Tensor;
