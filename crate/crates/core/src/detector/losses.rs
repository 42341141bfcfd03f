use ndarray::{Array2, ArrayView1};

use super::boxes::BoxCoder;
use super::types::{BBox, BoxAnnotation};
use crate::error::{Error, Result};
use crate::evaluation::compute_iou;

pub const HEAD_CODER: BoxCoder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
const HEAD_SMOOTH_L1_BETA: f64 = 1.0;

/// Binary cross-entropy on a logit; returns `(loss, dloss/dlogit)`.
pub fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, crate::nn::sigmoid(z) - y)
}

/// Smooth-L1 (Huber) on a residual; returns `(loss, dloss/dx)`.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

pub fn log_softmax(z: ArrayView1<f64>) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: ArrayView1<f64>) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Box-head outputs for the proposals of one image.
///
/// `class_logits` is `(M, K + 1)` with column 0 the background class;
/// `box_deltas` is `(M, 4K)` with class-specific deltas for class `c >= 1` in
/// columns `4(c-1)..4c`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPredictions {
    pub image_id: String,
    pub proposals: Vec<BBox>,
    pub class_logits: Array2<f64>,
    pub box_deltas: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotations {
    pub image_id: String,
    pub boxes: Vec<BoxAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLosses {
    pub cls: f64,
    pub reg: f64,
}

/// Per-proposal training target: class label (0 = background) and, for
/// foreground proposals, the encoded regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub label: usize,
    pub deltas: Option<[f64; 4]>,
}

/// Assigns each proposal to its best-overlapping ground truth when the IoU
/// reaches `fg_iou`, otherwise to background.
pub fn assign_roi_targets(proposals: &[BBox], gts: &[BoxAnnotation], fg_iou: f64) -> Vec<RoiTarget> {
    proposals
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .map(|g| (g, compute_iou(p, &g.bbox)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            match best {
                Some((g, iou)) if iou >= fg_iou => RoiTarget {
                    label: g.category + 1,
                    deltas: Some(HEAD_CODER.encode(p, &g.bbox)),
                },
                _ => RoiTarget { label: 0, deltas: None },
            }
        })
        .collect()
}

/// Classification and regression losses of the box head.
///
/// `L_cls` is the mean cross-entropy over all proposals. `L_reg` sums the
/// smooth-L1 of the true-class deltas over foreground proposals and divides by
/// the proposal count, so it is zero when nothing matches.
pub fn detection_losses(pred: &HeadPredictions, annotations: &ImageAnnotations, fg_iou: f64) -> Result<DetectionLosses> {
    if pred.image_id != annotations.image_id {
        return Err(Error::Contract(format!(
            "predictions for `{}` scored against annotations for `{}`",
            pred.image_id, annotations.image_id
        )));
    }
    let targets = assign_roi_targets(&pred.proposals, &annotations.boxes, fg_iou);
    let (losses, _, _) = head_losses_with_grad(&pred.class_logits, &pred.box_deltas, &targets)?;
    Ok(losses)
}

/// Losses plus gradients with respect to the logits and deltas.
pub fn head_losses_with_grad(
    class_logits: &Array2<f64>,
    box_deltas: &Array2<f64>,
    targets: &[RoiTarget],
) -> Result<(DetectionLosses, Array2<f64>, Array2<f64>)> {
    let m = targets.len();
    if class_logits.nrows() != m || box_deltas.nrows() != m {
        return Err(Error::Contract(format!(
            "{} targets for {} logit rows and {} delta rows",
            m,
            class_logits.nrows(),
            box_deltas.nrows()
        )));
    }
    let k1 = class_logits.ncols();
    if box_deltas.ncols() != 4 * (k1 - 1) {
        return Err(Error::Contract("box deltas must have 4 columns per foreground class".into()));
    }
    let mut dlogits = Array2::zeros(class_logits.raw_dim());
    let mut ddeltas = Array2::zeros(box_deltas.raw_dim());
    if m == 0 {
        return Ok((DetectionLosses { cls: 0.0, reg: 0.0 }, dlogits, ddeltas));
    }
    let norm = m as f64;
    let mut cls = 0.0;
    let mut reg = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if t.label >= k1 {
            return Err(Error::Contract(format!("label {} outside {} classes", t.label, k1)));
        }
        let logp = log_softmax(class_logits.row(r));
        cls -= logp[t.label];
        for (c, lp) in logp.iter().enumerate() {
            dlogits[[r, c]] = (lp.exp() - (c == t.label) as u8 as f64) / norm;
        }
        if let (Some(target), true) = (t.deltas, t.label > 0) {
            let base = 4 * (t.label - 1);
            for k in 0..4 {
                let (l, g) = smooth_l1(box_deltas[[r, base + k]] - target[k], HEAD_SMOOTH_L1_BETA);
                reg += l;
                ddeltas[[r, base + k]] = g / norm;
            }
        }
    }
    Ok((DetectionLosses { cls: cls / norm, reg: reg / norm }, dlogits, ddeltas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ann(id: &str, boxes: Vec<BoxAnnotation>) -> ImageAnnotations {
        ImageAnnotations { image_id: id.into(), boxes }
    }

    #[test]
    fn bce_matches_direct_formula() {
        let (l, g) = bce_with_logits(0.0, 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let z = 1.3f64;
        let p = 1.0 / (1.0 + (-z).exp());
        assert!((bce_with_logits(z, 0.0).0 + (1.0 - p).ln()).abs() < 1e-12);
    }

    #[test]
    fn half_probability_on_true_class() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let pred = HeadPredictions {
            image_id: "a".into(),
            proposals: vec![b],
            class_logits: array![[0.0, 0.0]],
            box_deltas: Array2::zeros((1, 4)),
        };
        let l = detection_losses(&pred, &ann("a", vec![BoxAnnotation { category: 0, bbox: b }]), 0.5).unwrap();
        assert!((l.cls - 0.693_147).abs() < 1e-6);
        // Zero deltas against a perfectly aligned proposal regress to nothing.
        assert_eq!(l.reg, 0.0);
    }

    #[test]
    fn confident_background_without_annotations_is_free() {
        let pred = HeadPredictions {
            image_id: "a".into(),
            proposals: vec![BBox::new(0.0, 0.0, 5.0, 5.0), BBox::new(1.0, 1.0, 9.0, 9.0)],
            class_logits: array![[0.0, -1000.0, -1000.0], [0.0, -1000.0, -1000.0]],
            box_deltas: Array2::from_elem((2, 8), 3.0),
        };
        let l = detection_losses(&pred, &ann("a", vec![]), 0.5).unwrap();
        assert_eq!(l, DetectionLosses { cls: 0.0, reg: 0.0 });
    }

    #[test]
    fn perfect_one_hot_matched_prediction_is_free() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let pred = HeadPredictions {
            image_id: "a".into(),
            proposals: vec![b],
            class_logits: array![[-1000.0, -1000.0, 0.0]],
            box_deltas: Array2::zeros((1, 8)),
        };
        let l = detection_losses(&pred, &ann("a", vec![BoxAnnotation { category: 1, bbox: b }]), 0.5).unwrap();
        assert_eq!(l.cls, 0.0);
    }

    #[test]
    fn mismatched_image_ids_are_a_contract_error() {
        let pred = HeadPredictions {
            image_id: "a".into(),
            proposals: vec![],
            class_logits: Array2::zeros((0, 2)),
            box_deltas: Array2::zeros((0, 4)),
        };
        assert!(matches!(detection_losses(&pred, &ann("b", vec![]), 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let logits = array![[0.3, -0.2, 0.5], [1.0, 0.1, -0.4]];
        let deltas = array![[0.1, -0.3, 0.2, 0.05, 0.4, 0.0, -0.1, 2.0], [0.0; 8]];
        let targets = vec![
            RoiTarget { label: 2, deltas: Some([0.2, -0.1, 0.0, 0.3]) },
            RoiTarget { label: 0, deltas: None },
        ];
        let total = |l: &Array2<f64>, d: &Array2<f64>| {
            let (x, _, _) = head_losses_with_grad(l, d, &targets).unwrap();
            x.cls + x.reg
        };
        let (_, gl, gd) = head_losses_with_grad(&logits, &deltas, &targets).unwrap();
        let eps = 1e-6;
        for idx in [(0, 0), (0, 2), (1, 1)] {
            let mut p = logits.clone();
            p[idx] += eps;
            let mut m = logits.clone();
            m[idx] -= eps;
            assert!(((total(&p, &deltas) - total(&m, &deltas)) / (2.0 * eps) - gl[idx]).abs() < 1e-8);
        }
        for idx in [(0, 4), (0, 7), (0, 0)] {
            let mut p = deltas.clone();
            p[idx] += eps;
            let mut m = deltas.clone();
            m[idx] -= eps;
            assert!(((total(&logits, &p) - total(&logits, &m)) / (2.0 * eps) - gd[idx]).abs() < 1e-8);
        }
    }
}
