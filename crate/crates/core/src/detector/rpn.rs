use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;

use super::boxes::{argsort_desc, nms, BoxCoder};
use super::losses::{bce_with_logits, smooth_l1};
use super::types::{BBox, FeatureMap, Proposal};
use super::DetectorConfig;
use crate::evaluation::compute_iou;
use crate::nn::{join_prefix, relu_backward_inplace, relu_inplace, sigmoid, Conv2d, ConvCache, Param, Parameterized};

pub const RPN_CODER: BoxCoder = BoxCoder::new([1.0, 1.0, 1.0, 1.0]);
const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Region proposal network: shared 3x3 conv, then per-anchor objectness
/// logits and box deltas from 1x1 convs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rpn {
    pub conv: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

/// `logits` is `(A, h, w)`; `deltas` is `(4A, h, w)` with channel `4a + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub logits: Array3<f64>,
    pub deltas: Array3<f64>,
}

impl RpnOutput {
    pub fn num_anchors(&self) -> usize {
        self.logits.len()
    }

    fn delta(&self, anchor: usize) -> [f64; 4] {
        let (_, h, w) = self.logits.dim();
        let (a, y, x) = (anchor / (h * w), (anchor / w) % h, anchor % w);
        std::array::from_fn(|k| self.deltas[[4 * a + k, y, x]])
    }

    fn logit(&self, anchor: usize) -> f64 {
        self.logits.as_slice().expect("standard layout")[anchor]
    }
}

#[derive(Debug, Clone)]
pub struct RpnCache {
    conv: ConvCache,
    hidden: Array3<f64>,
    cls: ConvCache,
    reg: ConvCache,
}

/// Objectness and box-regression losses of the RPN with their gradients.
#[derive(Debug, Clone)]
pub struct RpnLoss {
    pub objectness: f64,
    pub regression: f64,
    pub dlogits: Array3<f64>,
    pub ddeltas: Array3<f64>,
}

impl Rpn {
    pub fn new<R: Rng + ?Sized>(channels: usize, num_anchors: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::he(channels, channels, 3, 1, 1, rng),
            cls: Conv2d::normal(channels, num_anchors, 1, 1, 0, 0.01, rng),
            reg: Conv2d::normal(channels, 4 * num_anchors, 1, 1, 0, 0.01, rng),
        }
    }

    pub fn forward(&self, fmap: &FeatureMap) -> (RpnOutput, RpnCache) {
        let (mut hidden, conv) = self.conv.forward(&fmap.activations);
        relu_inplace(&mut hidden);
        let (logits, cls) = self.cls.forward(&hidden);
        let (deltas, reg) = self.reg.forward(&hidden);
        (
            RpnOutput { logits, deltas },
            RpnCache { conv, hidden, cls, reg },
        )
    }

    pub fn backward(&mut self, cache: &RpnCache, dlogits: &Array3<f64>, ddeltas: &Array3<f64>) -> Array3<f64> {
        let mut dh = self.cls.backward(&cache.cls, dlogits, true).expect("input grad");
        dh += &self.reg.backward(&cache.reg, ddeltas, true).expect("input grad");
        relu_backward_inplace(&mut dh, &cache.hidden);
        self.conv.backward(&cache.conv, &dh, true).expect("input grad")
    }
}

impl Parameterized for Rpn {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        self.conv.visit_params(&join_prefix(prefix, "conv"), f);
        self.cls.visit_params(&join_prefix(prefix, "cls"), f);
        self.reg.visit_params(&join_prefix(prefix, "reg"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join_prefix(prefix, "conv"), f);
        self.cls.visit_params_mut(&join_prefix(prefix, "cls"), f);
        self.reg.visit_params_mut(&join_prefix(prefix, "reg"), f);
    }
}

/// Decodes, clips and suppresses anchors into at most `max_proposals`
/// proposals sorted by objectness (descending).
pub fn select_proposals(
    output: &RpnOutput,
    anchors: &[BBox],
    image_hw: (usize, usize),
    cfg: &DetectorConfig,
    max_proposals: usize,
) -> Vec<Proposal> {
    assert_eq!(anchors.len(), output.num_anchors(), "anchor count");
    let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
    let logits = output.logits.as_slice().expect("standard layout");
    let order = argsort_desc(logits);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for &i in order.iter().take(cfg.rpn_pre_nms_top_n) {
        let b = RPN_CODER.decode(&anchors[i], output.delta(i)).clip(w, h);
        if b.width() >= cfg.min_proposal_size && b.height() >= cfg.min_proposal_size {
            boxes.push(b);
            scores.push(sigmoid(output.logit(i)));
        }
    }
    nms(&boxes, &scores, cfg.rpn_nms_iou)
        .into_iter()
        .take(max_proposals)
        .map(|k| Proposal { bbox: boxes[k], objectness: scores[k] })
        .collect()
}

/// Samples anchors against the ground truth and evaluates the RPN losses.
///
/// Anchors with IoU >= `rpn_positive_iou` (or the best anchor of each ground
/// truth) are positive, those below `rpn_negative_iou` negative. The
/// objectness loss is the mean BCE over the sample; the regression loss sums
/// smooth-L1 over positives and divides by the sample size.
pub fn rpn_loss<R: Rng + ?Sized>(
    output: &RpnOutput,
    anchors: &[BBox],
    gts: &[BBox],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RpnLoss {
    let n = anchors.len();
    let mut labels = vec![-1i8; n];
    let mut matched = vec![0usize; n];
    if gts.is_empty() {
        labels.fill(0);
    } else {
        let mut best_per_gt = vec![0.0f64; gts.len()];
        let ious: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| gts.iter().map(|g| compute_iou(a, g)).collect())
            .collect();
        for (i, row) in ious.iter().enumerate() {
            let (g, &best) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .expect("non-empty gt");
            matched[i] = g;
            if best >= cfg.rpn_positive_iou {
                labels[i] = 1;
            } else if best < cfg.rpn_negative_iou {
                labels[i] = 0;
            }
            for (g, &v) in row.iter().enumerate() {
                best_per_gt[g] = best_per_gt[g].max(v);
            }
        }
        for (i, row) in ious.iter().enumerate() {
            for (g, &v) in row.iter().enumerate() {
                if v > 0.0 && v == best_per_gt[g] {
                    labels[i] = 1;
                    matched[i] = g;
                }
            }
        }
    }

    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = (cfg.rpn_batch_size as f64 * cfg.rpn_positive_fraction) as usize;
    pos.truncate(max_pos);
    neg.truncate(cfg.rpn_batch_size - pos.len());

    let mut dlogits = Array3::zeros(output.logits.raw_dim());
    let mut ddeltas = Array3::zeros(output.deltas.raw_dim());
    let total = pos.len() + neg.len();
    if total == 0 {
        return RpnLoss { objectness: 0.0, regression: 0.0, dlogits, ddeltas };
    }
    let norm = total as f64;
    let (_, h, w) = output.logits.dim();
    let dl = dlogits.as_slice_mut().expect("fresh array");
    let mut objectness = 0.0;
    for (&i, y) in pos.iter().map(|i| (i, 1.0)).chain(neg.iter().map(|i| (i, 0.0))) {
        let (loss, grad) = bce_with_logits(output.logit(i), y);
        objectness += loss;
        dl[i] += grad / norm;
    }
    let mut regression = 0.0;
    for &i in &pos {
        let target = RPN_CODER.encode(&anchors[i], &gts[matched[i]]);
        let pred = output.delta(i);
        let (a, yy, xx) = (i / (h * w), (i / w) % h, i % w);
        for k in 0..4 {
            let (l, g) = smooth_l1(pred[k] - target[k], RPN_SMOOTH_L1_BETA);
            regression += l;
            ddeltas[[4 * a + k, yy, xx]] += g / norm;
        }
    }
    RpnLoss {
        objectness: objectness / norm,
        regression: regression / norm,
        dlogits,
        ddeltas,
    }
}
