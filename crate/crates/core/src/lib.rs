//! Bilevel knowledge distillation: a student is trained on a per-sample
//! mixture of hard-label and teacher-soft losses whose weights come from a
//! small meta network, itself trained by one-step hypergradients of a
//! balanced validation loss.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod bilevel;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::{Dtype, Real};
pub use tensor::Tensor;
