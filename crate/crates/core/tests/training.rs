use fogda::adversarial::{AdversarialConfig, DomainLabel};
use fogda::checkpoint::{load_checkpoint, save_checkpoint};
use fogda::config::RunConfig;
use fogda::detector::{BBox, BoxAnnotation, DetectorConfig, ImageArray};
use fogda::metric::AlignmentMode;
use fogda::nn::Parameterized;
use fogda::synthesis::image_rng;
use fogda::training::{
    run_training, total_loss, DetectionSample, Lambdas, LossReport, Model, TrainConfig, Trainer, TrainingData,
    TripletBatch,
};
use rand::Rng;

fn tiny_detector() -> DetectorConfig {
    DetectorConfig {
        num_classes: 2,
        backbone_channels: vec![4, 4, 6, 6, 6],
        rpn_batch_size: 16,
        rpn_pre_nms_top_n: 60,
        train_proposals: 20,
        test_proposals: 10,
        roi_batch_size: 8,
        head_hidden: 8,
        ..DetectorConfig::default()
    }
}

fn tiny_train(mode: AlignmentMode) -> TrainConfig {
    TrainConfig {
        mode,
        target_proposals: 5,
        image_classifier_hidden: 4,
        object_classifier_hidden: [8, 4],
        phase1_iterations: 4,
        phase2_iterations: 2,
        ..TrainConfig::default()
    }
}

fn image(seed: u64) -> ImageArray {
    let mut rng = image_rng(seed, 0);
    let phase: f64 = rng.random_range(0.0..6.0);
    ImageArray::from_fn(64, 96, |c, y, x| {
        0.5 + 0.3 * ((x as f64 * 0.21 + phase + c as f64).sin() * (y as f64 * 0.17 - phase).cos())
    })
    .unwrap()
}

fn sample(id: &str, seed: u64, domain: DomainLabel) -> DetectionSample {
    let annotations = (domain == DomainLabel::Source).then(|| {
        vec![
            BoxAnnotation { category: 0, bbox: BBox::new(10.0, 12.0, 40.0, 44.0) },
            BoxAnnotation { category: 1, bbox: BBox::new(50.0, 8.0, 86.0, 40.0) },
        ]
    });
    DetectionSample { id: id.into(), image: image(seed), annotations, domain }
}

fn set_param(model: &mut Model, name: &str, index: usize, value: f64) {
    model.visit_params_mut("", &mut |n, p| {
        if n == name {
            *p.value.iter_mut().nth(index).unwrap() = value;
        }
    });
}

/// Every parameter sees the gradient of one scalar: the domain classifiers
/// that of the total loss, everything upstream of them that of the loss with
/// the domain terms scaled by minus the reversal strength.
#[test]
fn step_gradients_match_finite_differences() {
    for mode in [AlignmentMode::Aligned, AlignmentMode::Unaligned] {
        let cfg = tiny_train(mode);
        let model = Model::new(tiny_detector(), &cfg, 5).unwrap();
        let mut trainer = Trainer::new(model, cfg.clone(), AdversarialConfig::default(), 5).unwrap();
        let (s, t, a) = (
            sample("s", 1, DomainLabel::Source),
            sample("t", 2, DomainLabel::Target),
            sample("a", 3, DomainLabel::Auxiliary),
        );
        let batch = TripletBatch { source: &s, target: &t, auxiliary: Some(&a) };
        let (_, plan) = trainer.compute_gradients(&batch, 0).unwrap();
        assert!(!plan.source_rois.is_empty() && !plan.target_boxes.is_empty());
        let lam = Lambdas { image: 2.5, object: 0.7 };
        trainer.evaluate_with_plan(&batch, &plan, lam, true).unwrap();
        let w = cfg.loss_weight;
        let reversed = |r: &LossReport| {
            let c = &r.components;
            c.cls + c.reg + w * (c.triplet_img.unwrap() + c.triplet_obj.unwrap_or(0.0))
                - w * (lam.image * c.img.unwrap() + lam.object * c.obj.unwrap())
        };

        let mut entries = Vec::new();
        let mut rng = image_rng(99, 0);
        trainer.model.visit_params("", &mut |name, p| {
            for _ in 0..2 {
                let i = rng.random_range(0..p.len());
                entries.push((name.to_string(), i, p.value.iter().nth(i).copied().unwrap(), p.grad.iter().nth(i).copied().unwrap()));
            }
        });
        let mut checked = 0;
        for (name, i, v, analytic) in entries {
            let classifier = name.starts_with("image_classifier") || name.starts_with("object_classifier");
            let eps = 1e-5;
            let mut eval = |x: f64| {
                set_param(&mut trainer.model, &name, i, x);
                let r = trainer.evaluate_with_plan(&batch, &plan, lam, false).unwrap();
                if classifier {
                    r.total
                } else {
                    reversed(&r)
                }
            };
            let numeric = (eval(v + eps) - eval(v - eps)) / (2.0 * eps);
            set_param(&mut trainer.model, &name, i, v);
            let tol = 1e-4 * analytic.abs().max(numeric.abs()) + 1e-7;
            assert!(
                (analytic - numeric).abs() <= tol,
                "{mode}: {name}[{i}] analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked > 40);
    }
}

fn run(cfg: &TrainConfig, seed: u64) -> (fogda::training::TrainedModel, String) {
    let source: Vec<_> = (0..3).map(|i| sample(&format!("s{i}"), i, DomainLabel::Source)).collect();
    let target: Vec<_> = (0..3).map(|i| sample(&format!("t{i}"), 10 + i, DomainLabel::Target)).collect();
    let aux: Vec<_> = (0..3).map(|i| sample(&format!("a{i}"), 20 + i, DomainLabel::Auxiliary)).collect();
    let model = Model::new(tiny_detector(), cfg, seed).unwrap();
    let data = TrainingData { source: &source, target: &target, auxiliary: &aux, rain: None };
    let mut log = Vec::new();
    let out = run_training(data, model, cfg, &AdversarialConfig::default(), seed, Some(&mut log)).unwrap();
    (out, String::from_utf8(log).unwrap())
}

#[test]
fn runs_are_reproducible() {
    let cfg = tiny_train(AlignmentMode::Aligned);
    let (a, log_a) = run(&cfg, 7);
    let (b, log_b) = run(&cfg, 7);
    assert_eq!(log_a, log_b);
    assert_eq!(a.model, b.model);
    let (c, _) = run(&cfg, 8);
    assert_ne!(a.model, c.model);
}

#[test]
fn reports_satisfy_the_composite_identity() {
    for mode in [AlignmentMode::Aligned, AlignmentMode::Unaligned] {
        let cfg = tiny_train(mode);
        let (out, log) = run(&cfg, 3);
        assert_eq!(out.reports.len(), 6);
        for r in &out.reports {
            assert!(!r.skipped);
            assert_eq!(r.total, total_loss(&r.components, cfg.loss_weight, mode).unwrap());
            assert_eq!(r.components.triplet_obj.is_some(), mode == AlignmentMode::Aligned);
            assert_eq!(r.lr, cfg.lr_at(r.iteration));
        }
        assert_eq!(log.lines().next().unwrap().contains("l_triplet_obj"), mode == AlignmentMode::Aligned);
        assert_eq!(log.lines().count(), 7);
    }
}

#[test]
fn source_only_ignores_the_other_domains() {
    let cfg = TrainConfig { source_only: true, ..tiny_train(AlignmentMode::Aligned) };
    let (out, log) = run(&cfg, 3);
    for r in &out.reports {
        assert_eq!(r.components.img, None);
        assert_eq!(r.lambda_img, None);
        assert_eq!(r.total, r.components.cls + r.components.reg);
    }
    assert_eq!(log.lines().next().unwrap(), "iteration\tlr\tl_cls\tl_reg\ttotal");
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let cfg = TrainConfig { phase1_iterations: 0, phase2_iterations: 0, ..tiny_train(AlignmentMode::Aligned) };
    let (out, _) = run(&cfg, 4);
    assert_eq!(out.model, Model::new(tiny_detector(), &cfg, 4).unwrap());

    let mut run_cfg = RunConfig::default();
    run_cfg.categories = vec!["a".into(), "b".into()];
    run_cfg.detector = tiny_detector();
    run_cfg.train = cfg;
    run_cfg.seed = 4;
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &out.model, out.iterations, &run_cfg).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.model, out.model);
    assert_eq!(loaded.meta.iteration, 0);
}

#[test]
fn inference_does_not_touch_the_model() {
    let cfg = tiny_train(AlignmentMode::Aligned);
    let model = Model::new(tiny_detector(), &cfg, 2).unwrap();
    let before = model.clone();
    let img = image(5);
    let a = model.detector.detect(&img, 0.0, 0.5).unwrap();
    let b = model.detector.detect(&img, 0.0, 0.5).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
    assert!(a.len() <= model.detector.config.max_detections);
    for d in &a {
        assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 96.0 && d.bbox.y2 <= 64.0);
    }
}

#[test]
fn target_labels_are_rejected() {
    let cfg = tiny_train(AlignmentMode::Aligned);
    let model = Model::new(tiny_detector(), &cfg, 2).unwrap();
    let mut trainer = Trainer::new(model, cfg, AdversarialConfig::default(), 2).unwrap();
    let s = sample("s", 1, DomainLabel::Source);
    let mut t = sample("t", 2, DomainLabel::Target);
    t.annotations = Some(vec![]);
    let a = sample("a", 3, DomainLabel::Auxiliary);
    assert!(trainer.train_step(&TripletBatch { source: &s, target: &t, auxiliary: Some(&a) }, 0).is_err());
}
