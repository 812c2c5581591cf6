//! Dense `f64` tensors with a reverse-mode gradient tape, deterministic
//! random streams and a finite-difference gradient oracle.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use rng::{Rng, RngState};
pub use tape::{AttentionLayout, Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
