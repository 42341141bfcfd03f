//! Minimal two-stage detector: strided conv backbone, single-scale anchor
//! RPN, fixed-grid ROI pooling and a two-layer box head.
//!
//! The detector exposes the intermediate taps the adaptation losses need
//! (feature maps, proposals, pooled and embedded object features). Inference
//! through [`Detector::detect`] touches only the detector's own weights.

mod backbone;
pub mod boxes;
mod head;
mod losses;
mod roi;
mod rpn;
mod types;

pub use backbone::{Backbone, BackboneCache};
pub use head::{BoxHead, EmbedCache};
pub use losses::{
    assign_roi_targets, bce_with_logits, detection_losses, head_losses_with_grad, log_softmax, smooth_l1,
    softmax, DetectionLosses, HeadPredictions, ImageAnnotations, RoiTarget, HEAD_CODER,
};
pub use roi::RoiPlan;
pub use rpn::{rpn_loss, select_proposals, Rpn, RpnCache, RpnLoss, RpnOutput};
pub use types::{BBox, BoxAnnotation, Detection, FeatureMap, ImageArray, ObjectFeatureSet, Proposal};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join_prefix, Param, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub anchor_size: f64,
    pub anchor_ratios: Vec<f64>,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_batch_size: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    pub min_proposal_size: f64,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub roi_batch_size: usize,
    pub roi_positive_fraction: f64,
    pub roi_fg_iou: f64,
    pub pool_size: usize,
    pub pool_sampling: usize,
    pub head_hidden: usize,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone_channels: vec![16, 32, 64, 64, 64],
            backbone_strides: vec![2, 2, 2, 2, 1],
            anchor_size: 32.0,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            rpn_batch_size: 128,
            rpn_positive_fraction: 0.5,
            rpn_pre_nms_top_n: 600,
            rpn_nms_iou: 0.7,
            min_proposal_size: 1.0,
            train_proposals: 300,
            test_proposals: 100,
            roi_batch_size: 64,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            pool_size: 7,
            pool_sampling: 2,
            head_hidden: 256,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone needs one stride per channel entry");
        }
        if self.backbone_strides.iter().any(|&s| s != 1 && s != 2) {
            return bad("backbone strides must be 1 or 2");
        }
        if self.anchor_ratios.is_empty() || self.anchor_size <= 0.0 {
            return bad("anchors need a positive size and at least one ratio");
        }
        if self.pool_size == 0 || self.pool_sampling == 0 {
            return bad("pool_size and pool_sampling must be positive");
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&3)
    }

    pub fn pooled_dim(&self) -> usize {
        self.feature_channels() * self.pool_size * self.pool_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub rpn: Rpn,
    pub head: BoxHead,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&config.backbone_channels, &config.backbone_strides, rng);
        let rpn = Rpn::new(config.feature_channels(), config.anchor_ratios.len(), rng);
        let head = BoxHead::new(config.pooled_dim(), config.head_hidden, config.num_classes, rng);
        Ok(Self { config, backbone, rpn, head })
    }

    pub fn extract_features(&self, image: &ImageArray) -> Result<FeatureMap> {
        Ok(self.backbone.forward(image)?.0)
    }

    pub fn anchors(&self, fmap: &FeatureMap) -> Vec<BBox> {
        let (h, w) = fmap.spatial();
        boxes::generate_anchors(h, w, fmap.stride, self.config.anchor_size, &self.config.anchor_ratios)
    }

    fn check_fmap(&self, fmap: &FeatureMap) -> Result<()> {
        if fmap.channels() != self.config.feature_channels() || !fmap.is_finite() {
            return Err(Error::InvalidInput(format!(
                "feature map must have {} finite channels, got {}",
                self.config.feature_channels(),
                fmap.channels()
            )));
        }
        Ok(())
    }

    /// At most `max_proposals` clipped proposals, sorted by objectness.
    pub fn propose_regions(&self, fmap: &FeatureMap, max_proposals: usize) -> Result<Vec<Proposal>> {
        self.check_fmap(fmap)?;
        if max_proposals == 0 {
            return Err(Error::InvalidInput("max_proposals must be at least 1".into()));
        }
        let (out, _) = self.rpn.forward(fmap);
        Ok(select_proposals(&out, &self.anchors(fmap), fmap.image_hw, &self.config, max_proposals))
    }

    /// Raw pooled features, one `C * P * P` row per proposal.
    pub fn pool_object_features(&self, fmap: &FeatureMap, proposals: &[Proposal]) -> ObjectFeatureSet {
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        ObjectFeatureSet { features: self.roi_plan(fmap, &boxes).pool(&fmap.activations) }
    }

    /// Box-head object features (the rows the object-level adaptation uses).
    pub fn object_features(&self, fmap: &FeatureMap, boxes: &[BBox]) -> ObjectFeatureSet {
        let pooled = self.roi_plan(fmap, boxes).pool(&fmap.activations);
        ObjectFeatureSet { features: self.head.embed(pooled).0 }
    }

    pub fn roi_plan(&self, fmap: &FeatureMap, boxes: &[BBox]) -> RoiPlan {
        RoiPlan::new(boxes, fmap.stride, fmap.spatial(), self.config.pool_size, self.config.pool_sampling)
    }

    /// Class-wise NMS'd detections with confidence at least `score_threshold`.
    pub fn detect(&self, image: &ImageArray, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let fmap = self.extract_features(image)?;
        let proposals = self.propose_regions(&fmap, self.config.test_proposals)?;
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let feats = self.object_features(&fmap, &boxes);
        let (logits, deltas) = self.head.predict(&feats.features);
        let (h, w) = (image.height() as f64, image.width() as f64);
        let mut detections = Vec::new();
        for class in 1..=self.config.num_classes {
            let mut cand_boxes = Vec::new();
            let mut cand_scores = Vec::new();
            for (r, proposal) in boxes.iter().enumerate() {
                let score = softmax(logits.row(r))[class];
                if score < score_threshold {
                    continue;
                }
                let d = std::array::from_fn(|k| deltas[[r, 4 * (class - 1) + k]]);
                let b = HEAD_CODER.decode(proposal, d).clip(w, h);
                if b.is_valid() {
                    cand_boxes.push(b);
                    cand_scores.push(score);
                }
            }
            for k in boxes::nms(&cand_boxes, &cand_scores, nms_iou) {
                detections.push(Detection { category: class - 1, bbox: cand_boxes[k], confidence: cand_scores[k] });
            }
        }
        detections.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        detections.truncate(self.config.max_detections);
        Ok(detections)
    }

    /// Training ROIs: proposals plus ground truth, subsampled to at most
    /// `roi_batch_size` with at most `roi_positive_fraction` foreground.
    pub fn sample_rois<R: Rng + ?Sized>(
        &self,
        proposals: &[Proposal],
        gts: &[BoxAnnotation],
        rng: &mut R,
    ) -> (Vec<BBox>, Vec<RoiTarget>) {
        let mut candidates: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        candidates.extend(gts.iter().map(|g| g.bbox));
        let targets = assign_roi_targets(&candidates, gts, self.config.roi_fg_iou);
        let mut fg: Vec<usize> = (0..candidates.len()).filter(|&i| targets[i].label > 0).collect();
        let mut bg: Vec<usize> = (0..candidates.len()).filter(|&i| targets[i].label == 0).collect();
        fg.shuffle(rng);
        bg.shuffle(rng);
        let max_fg = (self.config.roi_batch_size as f64 * self.config.roi_positive_fraction) as usize;
        fg.truncate(max_fg);
        bg.truncate(self.config.roi_batch_size - fg.len());
        fg.into_iter()
            .chain(bg)
            .map(|i| (candidates[i], targets[i]))
            .unzip()
    }
}

impl Parameterized for Detector {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        self.backbone.visit_params(&join_prefix(prefix, "backbone"), f);
        self.rpn.visit_params(&join_prefix(prefix, "rpn"), f);
        self.head.visit_params(&join_prefix(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params_mut(&join_prefix(prefix, "backbone"), f);
        self.rpn.visit_params_mut(&join_prefix(prefix, "rpn"), f);
        self.head.visit_params_mut(&join_prefix(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn detector() -> Detector {
        Detector::new(DetectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn image() -> ImageArray {
        ImageArray::from_fn(64, 96, |y, x, c| ((3 * y + 5 * x + 7 * c) % 17) as f64 / 16.0).unwrap()
    }

    #[test]
    fn pooled_rows_match_proposals() {
        let det = detector();
        let fmap = det.extract_features(&image()).unwrap();
        let props = det.propose_regions(&fmap, 20).unwrap();
        assert!(!props.is_empty() && props.len() <= 20);
        assert!(props.windows(2).all(|w| w[0].objectness >= w[1].objectness));
        let pooled = det.pool_object_features(&fmap, &props);
        assert_eq!(pooled.len(), props.len());
        assert_eq!(pooled.dim(), det.config.pooled_dim());
        assert_eq!(det.pool_object_features(&fmap, &[]).len(), 0);
    }

    #[test]
    fn zero_max_proposals_is_rejected() {
        let det = detector();
        let fmap = det.extract_features(&image()).unwrap();
        assert!(det.propose_regions(&fmap, 0).is_err());
    }

    #[test]
    fn threshold_of_one_filters_everything() {
        let det = detector();
        assert!(det.detect(&image(), 1.0, 0.5).unwrap().is_empty());
    }

    #[test]
    fn detections_respect_threshold_and_range() {
        let det = detector();
        for d in det.detect(&image(), 0.0, 0.5).unwrap() {
            assert!((0.0..=1.0).contains(&d.confidence));
            assert!(d.bbox.is_valid());
        }
    }

    #[test]
    fn roi_sampling_respects_budget() {
        let det = detector();
        let gts = [BoxAnnotation { category: 0, bbox: BBox::new(10.0, 10.0, 40.0, 40.0) }];
        let props: Vec<Proposal> = (0..200)
            .map(|i| Proposal { bbox: BBox::new(i as f64 * 0.2, 0.0, 30.0 + i as f64 * 0.2, 30.0), objectness: 0.5 })
            .collect();
        let (boxes, targets) = det.sample_rois(&props, &gts, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(boxes.len(), targets.len());
        assert!(boxes.len() <= det.config.roi_batch_size);
        assert!(targets.iter().filter(|t| t.label > 0).count() <= 16);
        assert!(targets.iter().any(|t| t.label == 1));
    }
}
