use ndarray::Array2;
use rand::Rng;

use crate::nn::{join_prefix, relu_backward_inplace, relu_inplace, Linear, Param, Parameterized};

/// Two fully-connected layers producing per-proposal object features,
/// followed by a classifier and class-specific box regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxHead {
    pub fc6: Linear,
    pub fc7: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    pooled: Array2<f64>,
    h6: Array2<f64>,
    h7: Array2<f64>,
}

impl BoxHead {
    pub fn new<R: Rng + ?Sized>(pooled_dim: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            fc6: Linear::he(pooled_dim, hidden, rng),
            fc7: Linear::he(hidden, hidden, rng),
            cls: Linear::normal(hidden, num_classes + 1, 0.01, rng),
            reg: Linear::normal(hidden, 4 * num_classes, 0.001, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc7.outputs()
    }

    /// Pooled rows `(M, C*P*P)` to object features `(M, hidden)`.
    pub fn embed(&self, pooled: Array2<f64>) -> (Array2<f64>, EmbedCache) {
        let mut h6 = self.fc6.forward(pooled.view());
        relu_inplace(&mut h6);
        let mut h7 = self.fc7.forward(h6.view());
        relu_inplace(&mut h7);
        (h7.clone(), EmbedCache { pooled, h6, h7 })
    }

    pub fn embed_backward(&mut self, cache: &EmbedCache, dfeatures: &Array2<f64>) -> Array2<f64> {
        let mut g = dfeatures.clone();
        relu_backward_inplace(&mut g, &cache.h7);
        let mut g = self.fc7.backward(cache.h6.view(), g.view());
        relu_backward_inplace(&mut g, &cache.h6);
        self.fc6.backward(cache.pooled.view(), g.view())
    }

    /// Object features to `(class_logits, box_deltas)`.
    pub fn predict(&self, features: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        (self.cls.forward(features.view()), self.reg.forward(features.view()))
    }

    pub fn predict_backward(
        &mut self,
        features: &Array2<f64>,
        dlogits: &Array2<f64>,
        ddeltas: &Array2<f64>,
    ) -> Array2<f64> {
        let mut g = self.cls.backward(features.view(), dlogits.view());
        g += &self.reg.backward(features.view(), ddeltas.view());
        g
    }
}

impl Parameterized for BoxHead {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        self.fc6.visit_params(&join_prefix(prefix, "fc6"), f);
        self.fc7.visit_params(&join_prefix(prefix, "fc7"), f);
        self.cls.visit_params(&join_prefix(prefix, "cls"), f);
        self.reg.visit_params(&join_prefix(prefix, "reg"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc6.visit_params_mut(&join_prefix(prefix, "fc6"), f);
        self.fc7.visit_params_mut(&join_prefix(prefix, "fc7"), f);
        self.cls.visit_params_mut(&join_prefix(prefix, "cls"), f);
        self.reg.visit_params_mut(&join_prefix(prefix, "reg"), f);
    }
}
