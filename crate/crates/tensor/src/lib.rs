//! Dense tensors with a tape-based reverse-mode automatic differentiation engine.
//!
//! The engine is deliberately small: a [`Tape`] records coarse tensor
//! operations (affine maps, layer norm, GELU, convolutions, reductions) and
//! [`Tape::backward`] replays them in reverse to produce gradients for every
//! leaf. Everything is generic over [`Real`] so the same graph can run in
//! `f32` for training and in `f64` for gradient checking.

mod error;
pub mod gradcheck;
mod ops;
mod real;
mod tape;
mod tensor;

pub use error::TensorError;
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
