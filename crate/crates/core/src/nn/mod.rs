//! Minimal differentiable numerical core: tensors on a reverse-mode tape,
//! the layer ops the networks need, AdamW, and finite-difference checking.

pub mod adamw;
pub mod grad_check;
pub mod op_checks;
pub mod ops;
pub mod tape;

pub use adamw::{adamw_step, AdamState, AdamW, AdamWConfig};
pub use grad_check::{grad_check, grad_check_filtered, GradCheckReport};
pub use ops::{ConvGeom, Padding};
pub use tape::{ParamStore, Parameter, Tape, Var};

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Uniform ±sqrt(1/fan_in) initialization.
pub fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    rng.uniform_tensor(shape, bound)
}
