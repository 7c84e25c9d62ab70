//! Semantically expanded prompt tuning.
//!
//! Learnable context vectors are trained against a frozen toy text encoder with
//! a cross-entropy objective plus margin-constrained pull/push terms toward
//! per-class semantic neighbors. The crate also carries the base-to-new and
//! cross-dataset evaluation protocol, ablation sweeps and the `sept` CLI.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to `f64`, which is what the trainer and the CLI use.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod encoder;
pub mod evaluation;
pub mod io;
pub mod error;
pub mod loss;
pub mod numerics;
pub mod prompting;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{cosine_sim, l2_dist, stable_softmax, Scalar, SeededRng};

pub type Vector = numerics::Vector<f64>;
pub type Matrix = numerics::Matrix<f64>;
pub type Encoder = encoder::TextEncoder<f64>;
pub type Context = prompting::ContextMatrix<f64>;
pub type Margins = loss::MarginTable<f64>;
pub type Breakdown = loss::LossBreakdown<f64>;
