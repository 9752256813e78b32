//! Minimal differentiable dense-tensor substrate.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub(crate) use graph::attention_forward;
pub use graph::{AttnMask, Gradients, Graph, Var};
pub use kernels::MASK_VALUE;
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use rng::{RngSnapshot, RngState, RNG_ALGORITHM};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Tensor of i.i.d. `N(0, std^2)` entries.
pub fn randn<T: Real>(shape: &[usize], std: f64, rng: &mut RngState) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}
