//! Dense tensors, a reverse-mode gradient tape and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use tape::{channel_dropout, dropout, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
