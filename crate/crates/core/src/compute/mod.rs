//! Differentiable computation substrate: tensors, the autodiff tape, parameters,
//! gradient checking and the transformer blocks built on top of them.

pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use encoder::{pool, sinusoidal_positions, Encoder, EncoderConfig, Linear, PoolingMode};
pub use gradcheck::{grad_check, grad_check_against, grad_check_params, GradCheckReport};
pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
