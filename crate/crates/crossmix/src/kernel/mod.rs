//! Numeric kernel: dense tensors, the reverse-mode tape, the Adam optimizer,
//! and finite-difference gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
