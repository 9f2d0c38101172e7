//! Shaped `f64` arrays with tape-based reverse-mode differentiation.
//!
//! The [`Graph`] records every operation applied during a forward pass;
//! [`Graph::backward`] then walks the tape once in reverse. Each
//! differentiable op is checked against central finite differences through
//! [`GradCheck`].

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, ParamSet};
pub use conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvImpl};
pub use error::{Result, TensorError};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{sigmoid, softmax_row, GateVars, Graph, Var};
pub use optim::{clip_grad_norm, global_grad_norm, AdamW, CosineWarmRestarts};
pub use tensor::Tensor;
