//! Dense tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use params::{accumulate_grads, global_norm, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::sigmoid;

use rand::Rng;

/// Tensor with entries drawn uniformly from `[-scale, scale)`.
pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
