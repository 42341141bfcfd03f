//! Domain-adaptive two-stage object detection for adverse weather: adaptive
//! gradient reversal, triplet regularization against a synthetic auxiliary
//! domain, and the synthesis, training and evaluation plumbing around them.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod fixture;
pub mod metric;
pub mod nn;
pub mod synthesis;
pub mod training;

pub use adversarial::{advgrl_backward, advgrl_forward, compute_lambda_adv, AdversarialConfig, DomainLabel, DomainPrediction};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::RunConfig;
pub use dataset::{ingest_dataset, DatasetManifest};
pub use detector::{BBox, BoxAnnotation, Detection, Detector, DetectorConfig, FeatureMap, ImageArray, ObjectFeatureSet, Proposal};
pub use error::{Error, Result};
pub use evaluation::{average_precision, EvalResult};
pub use metric::{AlignmentMode, TripletFeatures};
pub use synthesis::{FogLevel, RainLibrary, RainMap, RainMixConfig};
pub use training::{run_training, total_loss, DetectionSample, LossComponents, LossReport, Model, TrainConfig, Trainer, TripletBatch};
