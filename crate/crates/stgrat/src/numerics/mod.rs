//! Dense matrices, reverse-mode differentiation, and optimization.

pub mod matrix;
pub mod optim;
pub mod tape;

pub use matrix::{
    dropout, gelu, gelu_scalar, layer_norm, softmax, xavier_init, DropoutMode, Matrix,
};
pub use optim::{adam_update, warmup_learning_rate, OptimizerState};
pub use tape::{gradient_check, ParamId, ParamStore, Tape, TensorId};
