use std::cmp::Ordering;

use super::types::BBox;
use crate::evaluation::compute_iou;

/// Largest log-scale width/height delta accepted when decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Standard center/log-size box parameterization with per-coordinate weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const fn new(weights: [f64; 4]) -> Self {
        Self { weights }
    }

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let (tx, ty) = target.center();
        let (tw, th) = (target.width(), target.height());
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &BBox, deltas: [f64; 4]) -> BBox {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(MAX_LOG_SCALE);
        let dh = (deltas[3] / wh).min(MAX_LOG_SCALE);
        let cx = rx + dx * rw;
        let cy = ry + dy * rh;
        let w = rw * dw.exp();
        let h = rh * dh.exp();
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Anchors for an `h x w` feature map, ordered `(ratio, y, x)` so that anchor
/// `a * h * w + y * w + x` lines up with channel `a` of the RPN outputs.
pub fn generate_anchors(h: usize, w: usize, stride: usize, size: f64, ratios: &[f64]) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(ratios.len() * h * w);
    for &ratio in ratios {
        let aw = size / ratio.sqrt();
        let ah = size * ratio.sqrt();
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                anchors.push(BBox::new(cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah));
            }
        }
    }
    anchors
}

/// Indices sorted by descending score; ties keep input order.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept, higher-scored box exceeds `iou_threshold`. Returns kept
/// indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut keep: Vec<usize> = Vec::new();
    for i in argsort_desc(scores) {
        if keep.iter().all(|&k| compute_iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
