use std::io::Write;

use ndarray::{Array2, Array3, Ix2, Ix3};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use super::{total_loss_at, DetectionSample, LossComponents, LossReport, TrainConfig, TrainingLog, TripletBatch};
use crate::adversarial::{
    advgrl_backward, compute_lambda_adv, image_domain_loss_with_grad, object_domain_loss_with_grad, AdversarialConfig,
    DomainLabel, ImageDomainClassifier, ObjectDomainClassifier,
};
use crate::detector::{
    head_losses_with_grad, rpn_loss, select_proposals, BBox, Detector, DetectorConfig, EmbedCache, RoiPlan, RoiTarget,
};
use crate::error::{Error, Result};
use crate::metric::{image_triplet_loss_with_grad, object_triplet_loss_with_grad, AlignmentMode, TripletFeatures};
use crate::nn::{clip_grad_norm, global_grad_norm, grads_finite, join_prefix, zero_grads, Param, Parameterized, Sgd};
use crate::synthesis::{image_rng, synthesize_auxiliary, RainLibrary, RainMixConfig};

/// Training-only domain classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationHeads {
    pub image: ImageDomainClassifier,
    pub object: ObjectDomainClassifier,
}

impl Parameterized for AdaptationHeads {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        self.image.visit_params(&join_prefix(prefix, "image_classifier"), f);
        self.object.visit_params(&join_prefix(prefix, "object_classifier"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.image.visit_params_mut(&join_prefix(prefix, "image_classifier"), f);
        self.object.visit_params_mut(&join_prefix(prefix, "object_classifier"), f);
    }
}

/// Detector plus adaptation heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub detector: Detector,
    pub heads: AdaptationHeads,
}

impl Model {
    pub fn new(detector_config: DetectorConfig, train: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = image_rng(seed, u64::MAX);
        let detector = Detector::new(detector_config, &mut rng)?;
        let channels = detector.config.feature_channels();
        let dim = detector.head.feature_dim();
        let [h1, h2] = train.object_classifier_hidden;
        let heads = AdaptationHeads {
            image: ImageDomainClassifier::new(channels, train.image_classifier_hidden, &mut rng),
            object: ObjectDomainClassifier::new(dim, h1, h2, &mut rng),
        };
        Ok(Self { detector, heads })
    }
}

impl Parameterized for Model {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        self.detector.visit_params(&join_prefix(prefix, "detector"), f);
        self.heads.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.detector.visit_params_mut(&join_prefix(prefix, "detector"), f);
        self.heads.visit_params_mut(prefix, f);
    }
}

/// The discrete choices of one step: anchor-sampling seed, sampled source
/// ROIs with their targets, and the target proposals. Replaying a plan makes
/// the step a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub rpn_seed: u64,
    pub source_rois: Vec<BBox>,
    pub roi_targets: Vec<RoiTarget>,
    pub target_boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub image: f64,
    pub object: f64,
}

#[derive(Debug, Clone, Copy)]
enum LambdaSource {
    Fixed(Lambdas),
    FromLoss,
}

struct PassOutput {
    components: LossComponents,
    lambdas: Option<Lambdas>,
    plan: StepPlan,
}

/// Gradients still to be pushed through the box head and backbone of a
/// target or auxiliary image.
struct SideGrad {
    cache: crate::detector::BackboneCache,
    dfeatures: Array3<f64>,
    embeds: Vec<(RoiPlan, EmbedCache, Array2<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adversarial: AdversarialConfig,
    optimizer: Sgd,
    seed: u64,
    loss_ema: [Option<f64>; 2],
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, adversarial: AdversarialConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        adversarial.validate()?;
        let optimizer = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self { model, config, adversarial, optimizer, seed, loss_ema: [None; 2] })
    }

    fn step_rng(&self, iteration: u64) -> ChaCha8Rng {
        image_rng(self.seed, iteration + 1)
    }

    /// Zeroes and fills every parameter gradient for one step without
    /// updating anything. Returns the loss terms and the plan that was used.
    ///
    /// Upstream parameters receive the gradient of
    /// `cls + reg + w * (-lambda_img * img - lambda_obj * obj + triplet_img + triplet_obj)`
    /// and the domain classifiers that of `w * (img + obj)`.
    pub fn compute_gradients(&mut self, batch: &TripletBatch, iteration: u64) -> Result<(LossReport, StepPlan)> {
        zero_grads(&mut self.model);
        let mut rng = self.step_rng(iteration);
        let out = self.pass(batch, None, &mut rng, LambdaSource::FromLoss, true)?;
        let total = total_loss_at(&out.components, self.config.effective_weight(), self.config.mode, iteration)?;
        Ok((self.report(iteration, out.components, out.lambdas, total), out.plan))
    }

    /// Replays `plan` with fixed reversal strengths. With `backward` the
    /// gradients are zeroed first and then accumulated.
    pub fn evaluate_with_plan(
        &mut self,
        batch: &TripletBatch,
        plan: &StepPlan,
        lambdas: Lambdas,
        backward: bool,
    ) -> Result<LossReport> {
        if backward {
            zero_grads(&mut self.model);
        }
        let mut rng = self.step_rng(0);
        let out = self.pass(batch, Some(plan), &mut rng, LambdaSource::Fixed(lambdas), backward)?;
        let total = total_loss_at(&out.components, self.config.effective_weight(), self.config.mode, 0)?;
        Ok(self.report(0, out.components, out.lambdas, total))
    }

    /// One SGD update. Steps whose loss or gradient is non-finite are
    /// skipped and logged.
    pub fn train_step(&mut self, batch: &TripletBatch, iteration: u64) -> Result<LossReport> {
        zero_grads(&mut self.model);
        let mut rng = self.step_rng(iteration);
        let out = match self.pass(batch, None, &mut rng, LambdaSource::FromLoss, true) {
            Ok(out) => out,
            Err(Error::NonFiniteGradient(what)) => {
                log::warn!("iteration {iteration}: non-finite gradient in {what}; step skipped");
                return Ok(self.skipped(iteration, LossComponents::default(), None));
            }
            Err(e) => return Err(e),
        };
        let total = match total_loss_at(&out.components, self.config.effective_weight(), self.config.mode, iteration) {
            Ok(t) => t,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                log::warn!("{e}; step skipped");
                return Ok(self.skipped(iteration, out.components, out.lambdas));
            }
            Err(e) => return Err(e),
        };
        if !grads_finite(&self.model) {
            log::warn!("iteration {iteration}: non-finite parameter gradient; step skipped");
            return Ok(self.skipped(iteration, out.components, out.lambdas));
        }
        let grad_norm = match self.config.clip_norm {
            Some(max) => clip_grad_norm(&mut self.model, max),
            None => global_grad_norm(&self.model),
        };
        let lr = self.config.lr_at(iteration);
        self.optimizer.step(&mut self.model, lr);
        let mut report = self.report(iteration, out.components, out.lambdas, total);
        report.grad_norm = grad_norm;
        Ok(report)
    }

    fn report(&self, iteration: u64, components: LossComponents, lambdas: Option<Lambdas>, total: f64) -> LossReport {
        LossReport {
            iteration,
            lr: self.config.lr_at(iteration),
            components,
            lambda_img: lambdas.map(|l| l.image),
            lambda_obj: lambdas.map(|l| l.object),
            total,
            grad_norm: 0.0,
            skipped: false,
        }
    }

    fn skipped(&self, iteration: u64, components: LossComponents, lambdas: Option<Lambdas>) -> LossReport {
        LossReport { skipped: true, total: f64::NAN, ..self.report(iteration, components, lambdas, f64::NAN) }
    }

    fn pass(
        &mut self,
        batch: &TripletBatch,
        plan: Option<&StepPlan>,
        rng: &mut ChaCha8Rng,
        lambda_source: LambdaSource,
        backward: bool,
    ) -> Result<PassOutput> {
        batch.validate()?;
        let Trainer { model, config, adversarial, loss_ema, .. } = self;
        let Model { detector, heads } = model;
        let adapt = config.adapts();
        let w = config.effective_weight();
        let channels = detector.config.feature_channels();
        let annotations = batch.source.annotations.as_deref().unwrap_or(&[]);
        let gts: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();

        let (fs, cache_s) = detector.backbone.forward(&batch.source.image)?;
        let (rpn_out, rpn_cache) = detector.rpn.forward(&fs);
        let anchors = detector.anchors(&fs);
        let (target_fwd, aux_fwd) = if adapt {
            let aux = batch
                .auxiliary
                .ok_or_else(|| Error::Contract("adaptation needs an auxiliary sample".into()))?;
            (
                Some(detector.backbone.forward(&batch.target.image)?),
                Some(detector.backbone.forward(&aux.image)?),
            )
        } else {
            (None, None)
        };

        let plan = match plan {
            Some(p) => p.clone(),
            None => {
                let rpn_seed = rng.next_u64();
                let proposals = select_proposals(
                    &rpn_out,
                    &anchors,
                    fs.image_hw,
                    &detector.config,
                    detector.config.train_proposals,
                );
                let (source_rois, roi_targets) = detector.sample_rois(&proposals, annotations, rng);
                let target_boxes = match &target_fwd {
                    Some((ft, _)) => detector
                        .propose_regions(ft, config.target_proposals)?
                        .into_iter()
                        .map(|p| p.bbox)
                        .collect(),
                    None => Vec::new(),
                };
                StepPlan { rpn_seed, source_rois, roi_targets, target_boxes }
            }
        };

        // Detection losses on the source image.
        let rpn = rpn_loss(&rpn_out, &anchors, &gts, &detector.config, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(plan.rpn_seed));
        let roi_s = detector.roi_plan(&fs, &plan.source_rois);
        let (feat_s, embed_s) = detector.head.embed(roi_s.pool(&fs.activations));
        let (logits, deltas) = detector.head.predict(&feat_s);
        let (head, dlogits, ddeltas) = head_losses_with_grad(&logits, &deltas, &plan.roi_targets)?;
        let mut components = LossComponents {
            cls: rpn.objectness + head.cls,
            reg: rpn.regression + head.reg,
            ..Default::default()
        };

        let mut dfeat_s = Array2::<f64>::zeros(feat_s.raw_dim());
        let mut dfs = Array3::<f64>::zeros(fs.activations.raw_dim());
        let mut sides: Vec<SideGrad> = Vec::new();
        let mut lambdas = None;

        if let (Some((ft, cache_t)), Some((fa, cache_a))) = (target_fwd, aux_fwd) {
            let mut dft = Array3::<f64>::zeros(ft.activations.raw_dim());
            let mut dfa = Array3::<f64>::zeros(fa.activations.raw_dim());
            let mut t_embeds = Vec::new();
            let mut a_embeds = Vec::new();
            let labels = [DomainLabel::Source, DomainLabel::Target];

            let (pred_s, ic_s) = heads.image.forward(&fs.activations);
            let (pred_t, ic_t) = heads.image.forward(&ft.activations);
            let (l_img, g_img) = image_domain_loss_with_grad(&[pred_s, pred_t], &labels)?;

            let roi_t = detector.roi_plan(&ft, &plan.target_boxes);
            let (feat_t, embed_t) = detector.head.embed(roi_t.pool(&ft.activations));
            let (obj_s, oc_s) = heads.object.forward(feat_s.clone());
            let (obj_t, oc_t) = heads.object.forward(feat_t);
            let (l_obj, g_obj) = object_domain_loss_with_grad(&[obj_s, obj_t], &labels)?;

            let lam = match lambda_source {
                LambdaSource::Fixed(l) => l,
                LambdaSource::FromLoss => Lambdas {
                    image: resolve_lambda(adversarial, &mut loss_ema[0], l_img)?,
                    object: resolve_lambda(adversarial, &mut loss_ema[1], l_obj)?,
                },
            };

            let image_triplet = TripletFeatures::new(
                fs.activations.clone().into_dyn(),
                ft.activations.clone().into_dyn(),
                fa.activations.clone().into_dyn(),
                config.margin_delta,
            )?;
            let (r_img, g_rimg) = image_triplet_loss_with_grad(&image_triplet);

            let r_obj = if config.mode == AlignmentMode::Aligned {
                let roi_ta = detector.roi_plan(&ft, &plan.source_rois);
                let (feat_ta, embed_ta) = detector.head.embed(roi_ta.pool(&ft.activations));
                let roi_aa = detector.roi_plan(&fa, &plan.source_rois);
                let (feat_aa, embed_aa) = detector.head.embed(roi_aa.pool(&fa.activations));
                let triplet = TripletFeatures::new(
                    feat_s.clone().into_dyn(),
                    feat_ta.into_dyn(),
                    feat_aa.into_dyn(),
                    config.margin_delta,
                )?;
                let (r, g) = object_triplet_loss_with_grad(&triplet, config.mode)?;
                if backward {
                    dfeat_s.scaled_add(w, &to2(g.anchor));
                    t_embeds.push((roi_ta, embed_ta, to2(g.positive) * w));
                    a_embeds.push((roi_aa, embed_aa, to2(g.negative) * w));
                }
                Some(r)
            } else {
                None
            };

            if backward {
                // Classifiers descend on w * L; the features they read get the
                // reversed gradient.
                let g = heads.image.backward(&ic_s, &(&g_img[0] * w));
                dfs += &advgrl_backward(&g, lam.image)?;
                let g = heads.image.backward(&ic_t, &(&g_img[1] * w));
                dft += &advgrl_backward(&g, lam.image)?;
                let g = heads.object.backward(&oc_s, &(&g_obj[0] * w));
                dfeat_s += &advgrl_backward(&g, lam.object)?;
                let g = heads.object.backward(&oc_t, &(&g_obj[1] * w));
                t_embeds.push((roi_t, embed_t, advgrl_backward(&g, lam.object)?));

                dfs.scaled_add(w, &to3(g_rimg.anchor));
                dft.scaled_add(w, &to3(g_rimg.positive));
                dfa.scaled_add(w, &to3(g_rimg.negative));
            }

            components.img = Some(l_img);
            components.obj = Some(l_obj);
            components.triplet_img = Some(r_img);
            components.triplet_obj = r_obj;
            lambdas = Some(lam);
            sides.push(SideGrad { cache: cache_t, dfeatures: dft, embeds: t_embeds });
            sides.push(SideGrad { cache: cache_a, dfeatures: dfa, embeds: a_embeds });
        }

        if backward {
            dfeat_s += &detector.head.predict_backward(&feat_s, &dlogits, &ddeltas);
            let dpooled = detector.head.embed_backward(&embed_s, &dfeat_s);
            dfs += &roi_s.backward(&dpooled, channels);
            dfs += &detector.rpn.backward(&rpn_cache, &rpn.dlogits, &rpn.ddeltas);
            detector.backbone.backward(&cache_s, dfs);
            for side in sides {
                let mut df = side.dfeatures;
                for (plan, cache, dfeat) in side.embeds {
                    let dpooled = detector.head.embed_backward(&cache, &dfeat);
                    df += &plan.backward(&dpooled, channels);
                }
                detector.backbone.backward(&side.cache, df);
            }
        }

        Ok(PassOutput { components, lambdas, plan })
    }
}

fn to2(a: ndarray::ArrayD<f64>) -> Array2<f64> {
    a.into_dimensionality::<Ix2>().expect("object features are matrices")
}

fn to3(a: ndarray::ArrayD<f64>) -> Array3<f64> {
    a.into_dimensionality::<Ix3>().expect("feature maps are 3-D")
}

/// Reversal strength from the detached classifier loss, optionally smoothed.
/// A non-finite loss falls back to `lambda0`; the step is skipped anyway.
fn resolve_lambda(cfg: &AdversarialConfig, ema: &mut Option<f64>, loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Ok(cfg.lambda0);
    }
    let l_c = match cfg.loss_ema {
        Some(m) => {
            let s = ema.map_or(loss, |prev| m * prev + (1.0 - m) * loss);
            *ema = Some(s);
            s
        }
        None => loss,
    };
    compute_lambda_adv(l_c, cfg)
}

/// Datasets for a training run. In aligned mode `auxiliary[i]` must be the
/// auxiliary copy of `source[i]`.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub source: &'a [DetectionSample],
    pub target: &'a [DetectionSample],
    pub auxiliary: &'a [DetectionSample],
    /// Needed when the configuration resamples auxiliary images.
    pub rain: Option<(&'a RainLibrary, &'a RainMixConfig)>,
}

impl TrainingData<'_> {
    fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::InvalidInput("source set is empty".into()));
        }
        for s in self.source {
            if s.domain != DomainLabel::Source || s.annotations.is_none() {
                return Err(Error::Contract(format!("source entry `{}` is not a labeled source sample", s.id)));
            }
        }
        if !cfg.adapts() {
            return Ok(());
        }
        if self.target.is_empty() {
            return Err(Error::InvalidInput("target set is empty".into()));
        }
        for t in self.target {
            if t.domain != DomainLabel::Target || t.annotations.is_some() {
                return Err(Error::Contract(format!("target entry `{}` must be an unlabeled target sample", t.id)));
            }
        }
        if cfg.resample_auxiliary {
            if self.rain.is_none() {
                return Err(Error::Config("resample_auxiliary needs a rain library".into()));
            }
        } else if self.auxiliary.len() != self.source.len() {
            return Err(Error::Contract(format!(
                "{} auxiliary samples for {} source samples; they must correspond one to one",
                self.auxiliary.len(),
                self.source.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub iterations: u64,
    pub reports: Vec<LossReport>,
}

/// Runs the full two-phase schedule. Source images are visited in a fresh
/// random order every epoch. Targets are paired by index in aligned mode when
/// the target set mirrors the source set, otherwise drawn uniformly.
pub fn run_training(
    data: TrainingData,
    model: Model,
    cfg: &TrainConfig,
    adv: &AdversarialConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainedModel> {
    data.validate(cfg)?;
    let mut trainer = Trainer::new(model, cfg.clone(), *adv, seed)?;
    let table = TrainingLog::new(cfg);
    let io_err = |e| Error::io("training log", e);
    if let Some(out) = log.as_deref_mut() {
        table.write_header(out).map_err(io_err)?;
    }
    let mut sampler = image_rng(seed, 0);
    let n = data.source.len();
    let paired = cfg.mode == AlignmentMode::Aligned && data.target.len() == n;
    let mut order: Vec<usize> = Vec::new();
    let mut reports = Vec::with_capacity(cfg.total_iterations() as usize);
    let total = cfg.total_iterations();
    for iteration in 0..total {
        if order.is_empty() {
            order = (0..n).collect();
            order.shuffle(&mut sampler);
            order.reverse();
        }
        let i = order.pop().expect("refilled");
        let source = &data.source[i];
        let target_index = if paired || data.target.is_empty() { i } else { sampler.random_range(0..data.target.len()) };
        let resampled;
        let auxiliary = if !cfg.adapts() {
            None
        } else if cfg.resample_auxiliary {
            let (library, rainmix) = data.rain.expect("validated");
            let mut rng = image_rng(seed ^ 0xa5a5_a5a5, iteration);
            let (image, _) = synthesize_auxiliary(&source.image, library, rainmix, &mut rng)?;
            resampled = DetectionSample {
                id: format!("{}#aux{iteration}", source.id),
                image,
                annotations: None,
                domain: DomainLabel::Auxiliary,
            };
            Some(&resampled)
        } else {
            Some(&data.auxiliary[i])
        };
        let placeholder;
        let target = match data.target.get(target_index) {
            Some(t) => t,
            None => {
                placeholder = DetectionSample {
                    id: String::new(),
                    image: source.image.clone(),
                    annotations: None,
                    domain: DomainLabel::Target,
                };
                &placeholder
            }
        };
        let batch = TripletBatch { source, target, auxiliary };
        let report = trainer.train_step(&batch, iteration)?;
        if let Some(out) = log.as_deref_mut() {
            table.write(out, &report).map_err(io_err)?;
        }
        if iteration % 100 == 0 || iteration + 1 == total {
            log::info!("iteration {iteration}: total {:.4} lr {}", report.total, report.lr);
        }
        reports.push(report);
    }
    Ok(TrainedModel { model: trainer.model, iterations: total, reports })
}
