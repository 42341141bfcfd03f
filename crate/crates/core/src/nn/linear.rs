use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::param::{join, Param, Parameterized};

/// Fully-connected layer mapping rows `(M, in)` to `(M, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self::normal(inputs, outputs, std, rng)
    }

    pub fn normal<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(outputs, inputs, std, rng),
            bias: Param::zeros(outputs, 1),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Param::zeros(outputs, inputs),
            bias: Param::zeros(outputs, 1),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.inputs(), "linear input width");
        let mut y = x.dot(&self.weight.value.t());
        let b = self.bias.value.column(0);
        y.axis_iter_mut(Axis(0)).for_each(|mut row| row += &b);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut self.weight.grad);
        let db = dy.sum_axis(Axis(0));
        self.bias.grad.column_mut(0).scaled_add(1.0, &db);
        dy.dot(&self.weight.value)
    }
}

impl Parameterized for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
