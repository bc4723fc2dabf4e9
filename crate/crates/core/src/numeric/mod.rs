//! Differentiable numeric substrate: tensors, a recording tape, ADAM and a
//! finite-difference gradient checker.

mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use optim::{adam_step, AdamState};
pub use params::{ones_param, xavier_uniform, zeros_param, BoundParams, ParamStore};
pub use rng::{derive_seed, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
