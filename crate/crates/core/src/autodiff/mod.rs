//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.

mod cells;
pub mod container;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use cells::{conv_lstm_step, gru_step, lstm_step, rnn_step};
pub use gradcheck::gradient_check;
pub use graph::{BatchStats, BnMode, Gradients, Graph, Var, PROB_CLIP};
pub use params::{Bound, Params};
pub use tensor::Tensor;
