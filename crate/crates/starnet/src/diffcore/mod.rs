//! Minimal dense-tensor computation with reverse-mode differentiation,
//! an LSTM cell, and an Adam optimizer.

pub mod adam;
pub mod lstm;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use lstm::{lstm_step, LstmParams, LstmVars};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
