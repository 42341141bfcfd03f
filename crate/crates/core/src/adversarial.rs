//! Adaptive gradient reversal and the image/object-level domain classifiers.
//!
//! Domain losses are binary cross-entropies with ground truth 1 for source and
//! 0 for target, mean-reduced over locations, proposals and images.
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the logarithm;
//! inside the clamped region the loss is constant and its gradient is zero.

use ndarray::{Array, Array1, Array2, Array3, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{join_prefix, relu_backward_inplace, relu_inplace, sigmoid, Conv2d, ConvCache, Linear, Param, Parameterized};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub lambda0: f64,
    /// Hardness threshold: classifier losses below it mark a hard sample.
    pub alpha: f64,
    /// Overflow threshold capping the reversal strength.
    pub beta: f64,
    /// `false` gives the plain reversal layer with a fixed `lambda0`.
    pub adaptive: bool,
    /// Smoothing factor for an exponential moving average of the classifier
    /// loss fed to the lambda rule. `None` uses the current loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_ema: Option<f64>,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self { lambda0: 1.0, alpha: 0.63, beta: 30.0, adaptive: true, loss_ema: None }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0) || !self.lambda0.is_finite() {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= self.lambda0) {
            return Err(Error::Config(format!("beta ({}) must be at least lambda0 ({})", self.beta, self.lambda0)));
        }
        if let Some(m) = self.loss_ema {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("loss_ema must lie in [0, 1), got {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Source,
    Target,
    Auxiliary,
}

impl DomainLabel {
    /// Classifier ground truth: 1 for source, 0 for target.
    pub fn ground_truth(self) -> Result<f64> {
        match self {
            DomainLabel::Source => Ok(1.0),
            DomainLabel::Target => Ok(0.0),
            DomainLabel::Auxiliary => Err(Error::InvalidInput(
                "the auxiliary domain never feeds a domain classifier".into(),
            )),
        }
    }
}

/// Identity.
pub fn advgrl_forward<D: Dimension>(v: &Array<f64, D>) -> Array<f64, D> {
    v.clone()
}

/// `-lambda_adv * upstream`.
pub fn advgrl_backward<D: Dimension>(upstream: &Array<f64, D>, lambda_adv: f64) -> Result<Array<f64, D>> {
    if !(lambda_adv > 0.0) || !lambda_adv.is_finite() {
        return Err(Error::InvalidInput(format!("lambda_adv must be positive and finite, got {lambda_adv}")));
    }
    if upstream.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("upstream gradient entering the reversal layer".into()));
    }
    Ok(upstream.mapv(|g| -lambda_adv * g))
}

/// `min(lambda0 / l_c, beta)` when `l_c < alpha`, else `lambda0`. Plain
/// reversal (`adaptive = false`) always returns `lambda0`.
pub fn compute_lambda_adv(l_c: f64, cfg: &AdversarialConfig) -> Result<f64> {
    if !(l_c >= 0.0) || !l_c.is_finite() {
        return Err(Error::InvalidInput(format!("classifier loss must be finite and non-negative, got {l_c}")));
    }
    if !cfg.adaptive || l_c >= cfg.alpha {
        return Ok(cfg.lambda0);
    }
    if l_c == 0.0 {
        return Ok(cfg.beta);
    }
    Ok((cfg.lambda0 / l_c).min(cfg.beta))
}

/// `n` evenly spaced samples `(l_c, lambda_adv)` over `(0, max_loss]`.
pub fn lambda_curve(cfg: &AdversarialConfig, n: usize, max_loss: f64) -> Result<Vec<(f64, f64)>> {
    (1..=n)
        .map(|i| {
            let l = max_loss * i as f64 / n as f64;
            compute_lambda_adv(l, cfg).map(|lam| (l, lam))
        })
        .collect()
}

/// Domain-classifier logits: one per feature-map location (image level) or
/// one per proposal (object level).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPrediction {
    pub logits: Array1<f64>,
}

impl DomainPrediction {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Array1<f64> {
        self.logits.mapv(clamped_probability)
    }

    /// Mean probability (`P_i` of an image-level prediction).
    pub fn mean_probability(&self) -> Option<f64> {
        self.probabilities().mean()
    }
}

pub fn clamped_probability(logit: f64) -> f64 {
    sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Clamped BCE of a single logit with its derivative.
pub fn domain_bce(logit: f64, ground_truth: f64) -> (f64, f64) {
    let raw = sigmoid(logit);
    let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = -(ground_truth * p.ln() + (1.0 - ground_truth) * (1.0 - p).ln());
    let grad = if raw == p { p - ground_truth } else { 0.0 };
    (loss, grad)
}

/// Clamped BCE of a probability.
pub fn bce_from_probability(p: f64, ground_truth: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(ground_truth * p.ln() + (1.0 - ground_truth) * (1.0 - p).ln())
}

fn check_pairs(preds: &[DomainPrediction], labels: &[DomainLabel]) -> Result<Vec<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} domain labels", preds.len(), labels.len())));
    }
    labels.iter().map(|l| l.ground_truth()).collect()
}

/// Mean over images of the per-location mean BCE, with logit gradients.
pub fn image_domain_loss_with_grad(
    preds: &[DomainPrediction],
    labels: &[DomainLabel],
) -> Result<(f64, Vec<Array1<f64>>)> {
    let gts = check_pairs(preds, labels)?;
    if preds.is_empty() {
        return Err(Error::InvalidInput("image domain loss needs at least one image".into()));
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (pred, &g) in preds.iter().zip(&gts) {
        if pred.is_empty() {
            return Err(Error::InvalidInput("image-level prediction without locations".into()));
        }
        let m = pred.len() as f64;
        let mut sum = 0.0;
        let grad = pred.logits.mapv(|z| {
            let (l, d) = domain_bce(z, g);
            sum += l;
            d / (m * n)
        });
        total += sum / m;
        grads.push(grad);
    }
    Ok((total / n, grads))
}

pub fn image_domain_loss(preds: &[DomainPrediction], labels: &[DomainLabel]) -> Result<f64> {
    Ok(image_domain_loss_with_grad(preds, labels)?.0)
}

/// Mean BCE over every proposal of the batch (0 when there are none), with
/// logit gradients. Each proposal inherits its image's label.
pub fn object_domain_loss_with_grad(
    preds: &[DomainPrediction],
    labels: &[DomainLabel],
) -> Result<(f64, Vec<Array1<f64>>)> {
    let gts = check_pairs(preds, labels)?;
    let count: usize = preds.iter().map(DomainPrediction::len).sum();
    if count == 0 {
        return Ok((0.0, preds.iter().map(|_| Array1::zeros(0)).collect()));
    }
    let m = count as f64;
    let mut total = 0.0;
    let grads = preds
        .iter()
        .zip(&gts)
        .map(|(pred, &g)| {
            pred.logits.mapv(|z| {
                let (l, d) = domain_bce(z, g);
                total += l;
                d / m
            })
        })
        .collect();
    Ok((total / m, grads))
}

pub fn object_domain_loss(preds: &[DomainPrediction], labels: &[DomainLabel]) -> Result<f64> {
    Ok(object_domain_loss_with_grad(preds, labels)?.0)
}

/// Two 1x1 convolutions (`C -> hidden -> 1`) with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDomainClassifier {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ImageClassifierCache {
    conv1: ConvCache,
    hidden: Array3<f64>,
    conv2: ConvCache,
}

impl ImageDomainClassifier {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::he(channels, hidden, 1, 1, 0, rng),
            conv2: Conv2d::normal(hidden, 1, 1, 1, 0, 0.01, rng),
        }
    }

    pub fn zero_output_layer(&mut self) {
        self.conv2.weight.value.fill(0.0);
        self.conv2.bias.value.fill(0.0);
    }

    pub fn predict(&self, fmap: &FeatureMap) -> DomainPrediction {
        self.forward(&fmap.activations).0
    }

    pub fn forward(&self, features: &Array3<f64>) -> (DomainPrediction, ImageClassifierCache) {
        let (mut hidden, conv1) = self.conv1.forward(features);
        relu_inplace(&mut hidden);
        let (logits, conv2) = self.conv2.forward(&hidden);
        let logits = Array1::from_iter(logits.iter().copied());
        (DomainPrediction { logits }, ImageClassifierCache { conv1, hidden, conv2 })
    }

    /// Accumulates parameter gradients; returns the feature gradient.
    pub fn backward(&mut self, cache: &ImageClassifierCache, dlogits: &Array1<f64>) -> Array3<f64> {
        let (_, h, w) = cache.hidden.dim();
        let d = dlogits.clone().into_shape_with_order((1, h, w)).expect("one logit per location");
        let mut dh = self.conv2.backward(&cache.conv2, &d, true).expect("input grad");
        relu_backward_inplace(&mut dh, &cache.hidden);
        self.conv1.backward(&cache.conv1, &dh, true).expect("input grad")
    }
}

impl Parameterized for ImageDomainClassifier {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        self.conv1.visit_params(&join_prefix(prefix, "conv1"), f);
        self.conv2.visit_params(&join_prefix(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params_mut(&join_prefix(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join_prefix(prefix, "conv2"), f);
    }
}

/// Three fully-connected layers (`D -> h1 -> h2 -> 1`) with ReLUs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDomainClassifier {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

#[derive(Debug, Clone)]
pub struct ObjectClassifierCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

impl ObjectDomainClassifier {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden1: usize, hidden2: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::he(dim, hidden1, rng),
            fc2: Linear::he(hidden1, hidden2, rng),
            fc3: Linear::normal(hidden2, 1, 0.01, rng),
        }
    }

    pub fn zero_output_layer(&mut self) {
        self.fc3.weight.value.fill(0.0);
        self.fc3.bias.value.fill(0.0);
    }

    pub fn predict(&self, features: &Array2<f64>) -> DomainPrediction {
        self.forward(features.clone()).0
    }

    pub fn forward(&self, features: Array2<f64>) -> (DomainPrediction, ObjectClassifierCache) {
        let mut h1 = self.fc1.forward(features.view());
        relu_inplace(&mut h1);
        let mut h2 = self.fc2.forward(h1.view());
        relu_inplace(&mut h2);
        let logits = self.fc3.forward(h2.view()).column(0).to_owned();
        (DomainPrediction { logits }, ObjectClassifierCache { input: features, h1, h2 })
    }

    pub fn backward(&mut self, cache: &ObjectClassifierCache, dlogits: &Array1<f64>) -> Array2<f64> {
        let d = dlogits.clone().insert_axis(ndarray::Axis(1));
        let mut g = self.fc3.backward(cache.h2.view(), d.view());
        relu_backward_inplace(&mut g, &cache.h2);
        let mut g = self.fc2.backward(cache.h1.view(), g.view());
        relu_backward_inplace(&mut g, &cache.h1);
        self.fc1.backward(cache.input.view(), g.view())
    }
}

impl Parameterized for ObjectDomainClassifier {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        self.fc1.visit_params(&join_prefix(prefix, "fc1"), f);
        self.fc2.visit_params(&join_prefix(prefix, "fc2"), f);
        self.fc3.visit_params(&join_prefix(prefix, "fc3"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params_mut(&join_prefix(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join_prefix(prefix, "fc2"), f);
        self.fc3.visit_params_mut(&join_prefix(prefix, "fc3"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn pred(logits: &[f64]) -> DomainPrediction {
        DomainPrediction { logits: Array1::from(logits.to_vec()) }
    }

    #[test]
    fn reversal_examples() {
        let v = array![1.0, -2.5, 0.0];
        assert_eq!(advgrl_forward(&v), v);
        assert_eq!(advgrl_backward(&array![0.2, -0.4], 1.0).unwrap(), array![-0.2, 0.4]);
        assert_eq!(advgrl_backward(&array![1.0, 1.0, 1.0], 30.0).unwrap(), array![-30.0, -30.0, -30.0]);
        assert_eq!(advgrl_backward(&Array1::<f64>::zeros(4), 7.0).unwrap(), Array1::<f64>::zeros(4));
    }

    #[test]
    fn reversal_rejects_bad_inputs() {
        assert!(matches!(advgrl_backward(&array![f64::NAN], 1.0), Err(Error::NonFiniteGradient(_))));
        assert!(advgrl_backward(&array![1.0], 0.0).is_err());
    }

    #[test]
    fn lambda_examples() {
        let cfg = AdversarialConfig::default();
        assert_eq!(compute_lambda_adv(0.5, &cfg).unwrap(), 2.0);
        assert_eq!(compute_lambda_adv(0.01, &cfg).unwrap(), 30.0);
        assert_eq!(compute_lambda_adv(0.7, &cfg).unwrap(), 1.0);
        assert_eq!(compute_lambda_adv(0.63, &cfg).unwrap(), 1.0);
        assert_eq!(compute_lambda_adv(0.0, &cfg).unwrap(), 30.0);
        assert!(compute_lambda_adv(-0.1, &cfg).is_err());
        let plain = AdversarialConfig { adaptive: false, ..cfg };
        assert_eq!(compute_lambda_adv(0.01, &plain).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_clip_is_flat() {
        let cfg = AdversarialConfig { beta: 1.0, ..Default::default() };
        assert!(lambda_curve(&cfg, 200, 2.0).unwrap().iter().all(|&(_, l)| l == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(AdversarialConfig::default().validate().is_ok());
        assert!(AdversarialConfig { beta: 0.5, ..Default::default() }.validate().is_err());
        assert!(AdversarialConfig { lambda0: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdversarialConfig { loss_ema: Some(1.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn auxiliary_has_no_ground_truth() {
        assert!(DomainLabel::Auxiliary.ground_truth().is_err());
        assert!(image_domain_loss(&[pred(&[0.0])], &[DomainLabel::Auxiliary]).is_err());
    }

    #[test]
    fn image_classifier_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut clf = ImageDomainClassifier::new(4, 8, &mut rng);
        clf.zero_output_layer();
        let fmap = FeatureMap {
            activations: Array3::from_elem((4, 2, 3), 0.3),
            stride: 16,
            image_hw: (32, 48),
        };
        let p = clf.predict(&fmap);
        assert_eq!(p.len(), 6);
        assert_eq!(p.mean_probability(), Some(0.5));
        assert_eq!(pred(&[0.0, 0.0, 3f64.ln(), 3f64.ln()]).mean_probability().map(|v| (v * 1e12).round() / 1e12), Some(0.625));
    }

    #[test]
    fn object_classifier_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut clf = ObjectDomainClassifier::new(5, 16, 8, &mut rng);
        let x = array![[0.1, 0.2, 0.3, 0.4, 0.5], [1.0, 0.0, -1.0, 0.5, 0.2], [0.1, 0.2, 0.3, 0.4, 0.5]];
        let p = clf.predict(&x);
        assert_eq!(p.logits[0], p.logits[2]);
        assert!(clf.predict(&Array2::zeros((0, 5))).is_empty());
        clf.zero_output_layer();
        clf.fc3.bias.value[[0, 0]] = 9f64.ln();
        let p = clf.predict(&x.slice(ndarray::s![0..1, ..]).to_owned());
        assert!((p.probabilities()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let half = pred(&[0.0; 5]);
        for label in [DomainLabel::Source, DomainLabel::Target] {
            assert!((image_domain_loss(&[half.clone()], &[label]).unwrap() - LN2).abs() < 1e-12);
            assert!((object_domain_loss(&[half.clone()], &[label]).unwrap() - LN2).abs() < 1e-12);
        }
        let sure_source = pred(&[50.0, 60.0]);
        assert!(image_domain_loss(&[sure_source], &[DomainLabel::Source]).unwrap() < 1e-6);
        let sure_target = pred(&[-50.0]);
        assert!(object_domain_loss(&[sure_target], &[DomainLabel::Target]).unwrap() < 1e-6);
        assert_eq!(object_domain_loss(&[pred(&[]), pred(&[])], &[DomainLabel::Source, DomainLabel::Target]).unwrap(), 0.0);
    }

    #[test]
    fn reductions_are_means() {
        // logits whose BCE against the source label equal the given values
        let logit_for = |bce: f64| {
            let p: f64 = (-bce).exp();
            (p / (1.0 - p)).ln()
        };
        let a = pred(&[logit_for(0.2), logit_for(0.2)]);
        let b = pred(&[logit_for(0.6)]);
        let l = image_domain_loss(&[a, b], &[DomainLabel::Source; 2]).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
        let objs = [pred(&[logit_for(0.1), logit_for(0.3)]), pred(&[logit_for(0.8)])];
        let l = object_domain_loss(&objs, &[DomainLabel::Source; 2]).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let preds = vec![pred(&[0.3, -1.2, 2.0]), pred(&[0.7, -0.1])];
        let labels = [DomainLabel::Source, DomainLabel::Target];
        for (loss_fn, grad_fn) in [
            (image_domain_loss as fn(&[DomainPrediction], &[DomainLabel]) -> Result<f64>, image_domain_loss_with_grad as fn(&[DomainPrediction], &[DomainLabel]) -> Result<(f64, Vec<Array1<f64>>)>),
            (object_domain_loss, object_domain_loss_with_grad),
        ] {
            let (_, grads) = grad_fn(&preds, &labels).unwrap();
            for i in 0..preds.len() {
                for j in 0..preds[i].len() {
                    let eps = 1e-6;
                    let mut p = preds.clone();
                    p[i].logits[j] += eps;
                    let mut m = preds.clone();
                    m[i].logits[j] -= eps;
                    let fd = (loss_fn(&p, &labels).unwrap() - loss_fn(&m, &labels).unwrap()) / (2.0 * eps);
                    assert!((fd - grads[i][j]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", grads[i][j]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn lambda_is_monotone_and_bounded(a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let cfg = AdversarialConfig::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (la, lb) = (compute_lambda_adv(lo, &cfg).unwrap(), compute_lambda_adv(hi, &cfg).unwrap());
            prop_assert!(la >= lb);
            prop_assert!((1.0..=30.0).contains(&la));
        }

        #[test]
        fn object_loss_ignores_proposal_order(logits in proptest::collection::vec(-5.0f64..5.0, 1..12), seed in any::<u64>()) {
            let mut shuffled = logits.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = object_domain_loss(&[pred(&logits)], &[DomainLabel::Target]).unwrap();
            let b = object_domain_loss(&[pred(&shuffled)], &[DomainLabel::Target]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn probabilities_stay_in_open_interval(z in -1e6f64..1e6) {
            let p = clamped_probability(z);
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}
