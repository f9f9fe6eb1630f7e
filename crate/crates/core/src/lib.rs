//! Adversarial training toolkit: tensors with reverse-mode gradients, small
//! networks, PGD adversaries, natural/adversarial/delayed training loops,
//! checkpoints and robustness evaluation.

pub mod attack;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod persist;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{GradientContext, Gradients, Reduction, Var};
pub use error::{Error, Result};
pub use scalar::{Precision, Real};
pub use tensor::Tensor;
