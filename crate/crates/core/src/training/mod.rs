//! Composite objective, the three-domain training step and the SGD schedule.

mod log;
mod trainer;

pub use self::log::TrainingLog;
pub use trainer::{run_training, AdaptationHeads, Lambdas, Model, StepPlan, TrainedModel, Trainer, TrainingData};

use serde::{Deserialize, Serialize};

use crate::adversarial::DomainLabel;
use crate::detector::{BoxAnnotation, ImageArray};
use crate::error::{Error, Result};
use crate::metric::AlignmentMode;

/// An image with its domain and, for labeled source data, its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub id: String,
    pub image: ImageArray,
    pub annotations: Option<Vec<BoxAnnotation>>,
    pub domain: DomainLabel,
}

/// One source, one target and (optionally) one auxiliary sample.
#[derive(Debug, Clone, Copy)]
pub struct TripletBatch<'a> {
    pub source: &'a DetectionSample,
    pub target: &'a DetectionSample,
    pub auxiliary: Option<&'a DetectionSample>,
}

impl TripletBatch<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.source.domain != DomainLabel::Source || self.source.annotations.is_none() {
            return Err(Error::Contract(format!("`{}` is not a labeled source sample", self.source.id)));
        }
        if self.target.domain != DomainLabel::Target {
            return Err(Error::Contract(format!("`{}` is not a target sample", self.target.id)));
        }
        if self.target.annotations.is_some() {
            return Err(Error::Contract(format!("target sample `{}` carries annotations", self.target.id)));
        }
        if let Some(a) = self.auxiliary {
            if a.domain != DomainLabel::Auxiliary {
                return Err(Error::Contract(format!("`{}` is not an auxiliary sample", a.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the adaptation terms in the composite loss.
    pub loss_weight: f64,
    pub margin_delta: f64,
    pub mode: AlignmentMode,
    /// Train on the detection losses only (adaptation weight treated as 0).
    pub source_only: bool,
    pub phase1_iterations: u64,
    pub phase2_iterations: u64,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping and is written
    /// as `0` in config files.
    #[serde(with = "zero_as_none")]
    pub clip_norm: Option<f64>,
    /// Target proposals fed to the object-level domain classifier.
    pub target_proposals: usize,
    pub image_classifier_hidden: usize,
    pub object_classifier_hidden: [usize; 2],
    /// Draw a fresh auxiliary image every time a source image is used
    /// instead of the pre-generated one.
    pub resample_auxiliary: bool,
}

mod zero_as_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(if v == 0.0 { None } else { Some(v) })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weight: 0.1,
            margin_delta: 1.0,
            mode: AlignmentMode::Aligned,
            source_only: false,
            phase1_iterations: 2000,
            phase2_iterations: 800,
            phase1_lr: 0.01,
            phase2_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_norm: Some(10.0),
            target_proposals: 64,
            image_classifier_hidden: 256,
            object_classifier_hidden: [1024, 256],
            resample_auxiliary: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 50k iterations at 0.01, then 20k at 0.001.
    pub fn full_scale() -> Self {
        Self { phase1_iterations: 50_000, phase2_iterations: 20_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.loss_weight >= 0.0) || !self.loss_weight.is_finite() {
            return bad(format!("loss_weight must be non-negative, got {}", self.loss_weight));
        }
        if !(self.margin_delta > 0.0) {
            return bad(format!("margin_delta must be positive, got {}", self.margin_delta));
        }
        if !(self.phase1_lr > 0.0 && self.phase2_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        if self.target_proposals == 0 {
            return bad("target_proposals must be at least 1".into());
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        self.phase1_iterations + self.phase2_iterations
    }

    /// Step learning rate: `phase1_lr` before `phase1_iterations`, then `phase2_lr`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.phase1_iterations {
            self.phase1_lr
        } else {
            self.phase2_lr
        }
    }

    /// Whether the adaptation terms are computed at all.
    pub fn adapts(&self) -> bool {
        !self.source_only && self.loss_weight > 0.0
    }

    pub fn effective_weight(&self) -> f64 {
        if self.source_only {
            0.0
        } else {
            self.loss_weight
        }
    }
}

/// Loss terms of the composite objective. Adaptation terms that were not
/// computed are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub reg: f64,
    pub img: Option<f64>,
    pub obj: Option<f64>,
    pub triplet_img: Option<f64>,
    pub triplet_obj: Option<f64>,
}

/// `cls + reg + w * (img + obj + triplet_img + triplet_obj)` summed left to
/// right over the terms that are present. Unaligned mode drops `triplet_obj`.
pub fn total_loss(c: &LossComponents, w: f64, mode: AlignmentMode) -> Result<f64> {
    total_loss_at(c, w, mode, 0)
}

pub(crate) fn total_loss_at(c: &LossComponents, w: f64, mode: AlignmentMode, iteration: u64) -> Result<f64> {
    let named = [
        ("cls", Some(c.cls)),
        ("reg", Some(c.reg)),
        ("img", c.img),
        ("obj", c.obj),
        ("triplet_img", c.triplet_img),
        ("triplet_obj", c.triplet_obj),
    ];
    for (name, v) in named {
        if v.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration, component: name.to_string() });
        }
    }
    let obj_triplet = match mode {
        AlignmentMode::Aligned => c.triplet_obj,
        AlignmentMode::Unaligned => None,
    };
    let adapt: Vec<f64> = [c.img, c.obj, c.triplet_img, obj_triplet].into_iter().flatten().collect();
    let base = c.cls + c.reg;
    if adapt.is_empty() {
        return Ok(base);
    }
    let sum = adapt.iter().skip(1).fold(adapt[0], |acc, v| acc + v);
    Ok(base + w * sum)
}

/// Everything measured in one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub lr: f64,
    pub components: LossComponents,
    pub lambda_img: Option<f64>,
    pub lambda_obj: Option<f64>,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// The update was not applied because a loss or gradient was non-finite.
    pub skipped: bool,
}
