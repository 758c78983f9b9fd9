//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are created with
//! [`Tape::leaf`] (trainable) or [`Tape::constant`]; every operation on a
//! [`Var`] appends a node, and [`Tape::backward`] sweeps the record in
//! reverse.
//!
//! ```
//! use kanite::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub(crate) use ops::{logsumexp, silu, silu_grad};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
