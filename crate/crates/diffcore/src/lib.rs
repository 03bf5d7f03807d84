//! Minimal reverse-mode differentiation for small image pipelines.
//!
//! Values are [`Tensor`]s of `f64`. Operations are recorded on a [`Tape`]
//! as they run; [`Tape::backward`] replays the tape in reverse from a scalar
//! root. [`finite_diff_check`] verifies any tape-built function against
//! central differences.
//!
//! ```
//! use irpatch_diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let root = tape.reduce_sum(sq).unwrap();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

// NaN must fail validation, so checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_at, GradCheck, DEFAULT_EPS};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid shape: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    NonFinite { op: &'static str, detail: String },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op} is not differentiable")]
    NonDifferentiable { op: &'static str },
}
