//! Detection metrics (per-class AP at a fixed IoU threshold, mAP) and the
//! feature-distance hardness miner.
//!
//! AP uses all-point interpolation: the area under the precision/recall curve
//! after replacing each precision with the maximum precision at any higher
//! recall. Detections are matched greedily in descending confidence order,
//! each to the highest-IoU ground truth of the same image that is still
//! unmatched; every ground truth is consumed by at most one true positive.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::{BBox, Detector, FeatureMap, ImageArray};
use crate::error::{Error, Result};

pub const INTERPOLATION_SCHEME: &str = "all-point";

/// Intersection over union. Boxes with zero area give 0.
pub fn compute_iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (area_a + area_b - inter)
}

/// One detection of a single class, tagged with the index of its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub image: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Marks each detection as true/false positive, in descending confidence
/// order (stable for ties). Returns the flags in that order.
pub fn match_detections(
    detections: &[ScoredDetection],
    groundtruth: &[Vec<BBox>],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<&ScoredDetection> = detections.iter().collect();
    order.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal));
    let mut used: Vec<Vec<bool>> = groundtruth.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|det| {
            let Some(gts) = groundtruth.get(det.image) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[det.image][g] {
                    continue;
                }
                let iou = compute_iou(&det.bbox, gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= iou_threshold => {
                    used[det.image][g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision for one class.
///
/// Returns `None` when the class has no ground truth (AP undefined).
pub fn average_precision(
    detections: &[ScoredDetection],
    groundtruth: &[Vec<BBox>],
    iou_threshold: f64,
) -> Option<f64> {
    let num_gt: usize = groundtruth.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let flags = match_detections(detections, groundtruth, iou_threshold);
    Some(ap_from_flags(&flags, num_gt))
}

/// AP from ranked true/false-positive flags against `num_gt` ground truths.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(k, &is_tp)| {
            tp += is_tp as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    // fold from +0.0: an empty f64 sum is -0.0
    let area = flags
        .iter()
        .zip(&envelope)
        .filter(|(&is_tp, _)| is_tp)
        .fold(0.0, |acc, (_, &p)| acc + p);
    area / num_gt as f64
}

pub fn mean_ap(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::InvalidInput("mAP needs at least one evaluated class".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub category: String,
    /// `None` when the class has no ground truth in the evaluated split.
    pub ap: Option<f64>,
    pub num_groundtruth: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub iou_threshold: f64,
    pub interpolation: String,
    pub detection_count: usize,
    pub image_count: usize,
}

impl EvalResult {
    /// Categories that were excluded from mAP for lack of ground truth.
    pub fn excluded_classes(&self) -> Vec<&str> {
        self.per_class
            .iter()
            .filter(|c| c.ap.is_none())
            .map(|c| c.category.as_str())
            .collect()
    }

    /// Fixed-width per-class table, one column per category plus mAP.
    pub fn table(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        for c in &self.per_class {
            let w = c.category.len().max(6);
            header.push_str(&format!("{:>w$} ", c.category));
            match c.ap {
                Some(ap) => row.push_str(&format!("{:>w$.1} ", ap * 100.0)),
                None => row.push_str(&format!("{:>w$} ", "n/a")),
            }
        }
        header.push_str("|    mAP");
        row.push_str(&format!("| {:>6.1}", self.map * 100.0));
        format!("{header}\n{row}")
    }
}

/// Per-class AP over a set of images given each image's detections and
/// ground truth `(category, box)` pairs.
pub fn evaluate_detections(
    categories: &[String],
    detections: &[Vec<crate::detector::Detection>],
    groundtruth: &[Vec<crate::detector::BoxAnnotation>],
    iou_threshold: f64,
) -> Result<EvalResult> {
    if detections.len() != groundtruth.len() {
        return Err(Error::Contract(format!(
            "{} detection lists for {} ground-truth lists",
            detections.len(),
            groundtruth.len()
        )));
    }
    let mut per_class = Vec::with_capacity(categories.len());
    let mut evaluated = Vec::new();
    for (c, name) in categories.iter().enumerate() {
        let gts: Vec<Vec<BBox>> = groundtruth
            .iter()
            .map(|anns| anns.iter().filter(|a| a.category == c).map(|a| a.bbox).collect())
            .collect();
        let dets: Vec<ScoredDetection> = detections
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter().filter(|d| d.category == c).map(move |d| ScoredDetection {
                    image,
                    bbox: d.bbox,
                    confidence: d.confidence,
                })
            })
            .collect();
        let ap = average_precision(&dets, &gts, iou_threshold);
        if let Some(ap) = ap {
            evaluated.push(ap);
        } else {
            log::warn!("category `{name}` has no ground truth; excluded from mAP");
        }
        per_class.push(ClassAp {
            category: name.clone(),
            ap,
            num_groundtruth: gts.iter().map(Vec::len).sum(),
            num_detections: dets.len(),
        });
    }
    Ok(EvalResult {
        map: mean_ap(&evaluated)?,
        per_class,
        iou_threshold,
        interpolation: INTERPOLATION_SCHEME.to_string(),
        detection_count: detections.iter().map(Vec::len).sum(),
        image_count: detections.len(),
    })
}

/// Mean absolute difference between aligned source and target feature maps.
/// Smaller values mean the pair is harder to transfer.
pub fn approximated_hardness(source: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if source.activations.dim() != target.activations.dim() {
        return Err(Error::Contract(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            source.activations.dim(),
            target.activations.dim()
        )));
    }
    let n = source.activations.len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = source
        .activations
        .iter()
        .zip(target.activations.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessRecord {
    pub image_id: String,
    pub ah: f64,
    pub rank: usize,
}

/// An aligned clear/adverse image pair.
#[derive(Debug, Clone)]
pub struct HardnessPair {
    pub id: String,
    pub source: ImageArray,
    pub target: ImageArray,
}

/// Ranks the records by ascending hardness score (ties keep input order) and
/// keeps the first `k`.
pub fn rank_hardness(scores: Vec<(String, f64)>, k: usize) -> Vec<HardnessRecord> {
    if k > scores.len() {
        log::warn!("requested {k} hard examples from a dataset of {}; returning all", scores.len());
    }
    let mut scores = scores;
    scores.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal));
    scores
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, (image_id, ah))| HardnessRecord { image_id, ah, rank })
        .collect()
}

pub fn mine_hard_examples(pairs: &[HardnessPair], detector: &Detector, k: usize) -> Result<Vec<HardnessRecord>> {
    let scores = pairs
        .iter()
        .map(|p| {
            let fs = detector.extract_features(&p.source)?;
            let ft = detector.extract_features(&p.target)?;
            Ok((p.id.clone(), approximated_hardness(&fs, &ft)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_hardness(scores, k))
}
