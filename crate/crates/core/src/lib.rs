//! Weight multiplexing for compact vision transformers.
//!
//! A teacher transformer is compressed by sharing block weights across
//! consecutive layers, giving each layer small unshared transformations
//! (head-mixing matrices around the attention softmax and a depth-wise
//! convolution in front of the MLP), and training the compact model by
//! distilling logits, attention relations and hidden-state relations.
//!
//! * [`numerics`]: tensors, kernels, gradient tape, gradient checker.
//! * [`transformer`]: configuration, parameter layout and the forward pass.
//! * [`multiplex`]: sharing plans, weight transformations, compact models.
//! * [`distill`]: relation matrices, losses, optimizer and training loop.
//! * [`diagnostics`]: linear CKA and per-layer gradient norms.

pub mod diagnostics;
pub mod distill;
mod error;
pub mod multiplex;
pub mod numerics;
pub mod transformer;

pub use error::{Error, Result};
