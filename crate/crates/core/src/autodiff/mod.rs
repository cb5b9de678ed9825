//! Minimal reverse-mode differentiation: a tape over 2-D `f64` tensors,
//! dense and LSTM layers, squared-error and cross-entropy losses, Adam and a
//! finite-difference gradient checker.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, TensorCheck, GRAD_CHECK_FLOOR};
pub use layers::{
    bce_loss, dense_forward, lstm_forward, mse_loss, xavier_uniform, Activation, Dense, Lstm,
    LstmCellParams, LstmOutput, LstmTrace,
};
pub use optim::{Adam, AdamConfig};
pub use params::{Parameter, ParameterSet};
pub use tape::{sigmoid, Tape, Var, BCE_EPS};
pub(crate) use tensor::gemm;
pub use tensor::Tensor;

/// Global gradient-norm clipping threshold used during training.
pub const GRAD_CLIP_NORM: f64 = 5.0;
