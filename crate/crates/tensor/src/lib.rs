//! Dense `f32` tensors with tape-based reverse-mode autodiff, Adam, a flat
//! checkpoint format and counter-based random streams.

pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
mod kernels;
mod optim;
pub mod par;
mod params;
pub mod prng;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use optim::{adam_step, AdamState};
pub use params::{Bound, ParamSet};
pub use prng::Prng;
pub use tape::{primitive_set, sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, numel, strides, Tensor};
