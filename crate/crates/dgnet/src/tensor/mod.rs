//! Dense N-dimensional tensors with a reverse-mode differentiation tape.
//!
//! The engine is deliberately small: exactly the operations a staged
//! convolutional graph network needs (convolution, pooling, affine maps,
//! relu/sigmoid, smoothed cross-entropy, per-sample scaling and the batched
//! adjacency-matrix column-write/row-slice pair), plus add, scalar multiply,
//! reshape, sum and mean. Values are generic over [`Element`] so training
//! runs in 32-bit while gradient checks run in 64-bit.

mod array;
mod conv;
mod tape;

pub use array::{Array, Element};
pub use conv::ConvDims;
pub use tape::{Activation, Op, Tape, TensorId};
