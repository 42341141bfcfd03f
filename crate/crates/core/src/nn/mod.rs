//! Minimal dense/convolutional layers with hand-written backward passes.
//!
//! Every layer keeps its forward pass pure (`&self`) and returns whatever the
//! backward pass needs as an explicit cache value, so the same layer can be
//! applied to several images in one training step and its parameter gradients
//! accumulate across all of them.

mod conv;
mod linear;
mod param;
mod sgd;

pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use param::{Param, Parameterized};
pub(crate) use param::join as join_prefix;
pub use sgd::Sgd;

use ndarray::{Array, Dimension};

pub fn relu_inplace<D: Dimension>(x: &mut Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `grad` by the positive support of a ReLU output.
pub fn relu_backward_inplace<D: Dimension>(grad: &mut Array<f64, D>, output: &Array<f64, D>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Visits every parameter gradient and returns the global L2 norm.
pub fn global_grad_norm(model: &impl Parameterized) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g * g).sum::<f64>();
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm measured before clipping.
pub fn clip_grad_norm(model: &mut impl Parameterized, max_norm: f64) -> f64 {
    let norm = global_grad_norm(model);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-12);
        model.visit_params_mut("", &mut |_, p| p.grad.mapv_inplace(|g| g * scale));
    }
    norm
}

pub fn zero_grads(model: &mut impl Parameterized) {
    model.visit_params_mut("", &mut |_, p| p.zero_grad());
}

pub fn grads_finite(model: &impl Parameterized) -> bool {
    let mut finite = true;
    model.visit_params("", &mut |_, p| {
        finite &= p.grad.iter().all(|g| g.is_finite());
    });
    finite
}
