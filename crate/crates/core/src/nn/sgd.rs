use ndarray::Array2;

use super::param::Parameterized;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay,
/// following the usual `v = m*v + (g + wd*w); w -= lr*v` update.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Array2<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl Parameterized, lr: f64) {
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut idx = 0;
        model.visit_params_mut("", &mut |_, p| {
            if velocity.len() == idx {
                velocity.push(Array2::zeros(p.value.raw_dim()));
            }
            let v = &mut velocity[idx];
            ndarray::Zip::from(&mut *v)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|v, &g, &w| *v = momentum * *v + g + wd * w);
            p.value.scaled_add(-lr, v);
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn first_step_is_plain_gradient_step_and_momentum_accumulates() {
        let mut layer = Linear::zeros(1, 1);
        layer.weight.value = array![[1.0]];
        layer.weight.grad = array![[0.5]];
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut layer, 0.1);
        assert!((layer.weight.value[[0, 0]] - 0.95).abs() < 1e-15);
        opt.step(&mut layer, 0.1);
        // v = 0.9*0.5 + 0.5 = 0.95
        assert!((layer.weight.value[[0, 0]] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut layer = Linear::zeros(1, 1);
        layer.weight.value = array![[2.0]];
        let mut opt = Sgd::new(0.0, 0.0005);
        opt.step(&mut layer, 0.01);
        assert!((layer.weight.value[[0, 0]] - (2.0 - 0.01 * 0.001)).abs() < 1e-15);
    }
}
