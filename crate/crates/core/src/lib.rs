//! Adversarial infrared patch generation against a small thermal person
//! detector: pattern parameterization, cloth transforms, synthetic scenes,
//! detector training, patch optimization and evaluation.

// NaN must fail validation, so checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod pattern;
pub mod rng;
pub mod scene;
pub mod warp;

pub use error::{Error, Result};
