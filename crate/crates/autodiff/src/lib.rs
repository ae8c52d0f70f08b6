//! A compact reverse-mode automatic differentiation engine on top of `ndarray`.
//!
//! Tensors record the op that produced them; [`Tensor::backward`] walks the recorded graph from a
//! scalar and returns gradients for every leaf that asked for one. Parameters live in a
//! [`ParamStore`] and are snapshotted into the graph each forward pass, so an optimizer can update
//! them in place between steps. Everything is generic over `f32` and `f64`.

mod conv;
mod error;
mod float;
mod ops;
mod param;
pub mod safetensors;
mod tensor;

pub use conv::{softmax_rows, Conv2dOpts};
pub use error::{Error, Result};
pub use float::{DType, Float};
pub use param::{Builder, Init, Param, ParamId, ParamStore};
pub use tensor::{is_grad_enabled, no_grad, Gradients, Tensor};
