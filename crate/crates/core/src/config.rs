//! Run configuration stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::AdversarialConfig;
use crate::dataset::DEFAULT_CATEGORIES;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::fixture::FIXTURE_CATEGORIES;
use crate::synthesis::{FogLevel, RainMixConfig, DEFAULT_ATMOSPHERIC_LIGHT};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub fog_level: FogLevel,
    /// Overrides the preset density of `fog_level`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fog_density: Option<f64>,
    pub atmospheric_light: f64,
    pub rainmix: RainMixConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            fog_level: FogLevel::Dense,
            fog_density: None,
            atmospheric_light: DEFAULT_ATMOSPHERIC_LIGHT,
            rainmix: RainMixConfig::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn density(&self) -> f64 {
        self.fog_density.unwrap_or_else(|| self.fog_level.density())
    }
}

/// Dataset roots, each laid out as `images/<split>/` plus
/// `annotations/<split>.json`. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<PathBuf>,
    /// Directory of rain-streak PNGs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rain: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            auxiliary: None,
            rain: None,
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub iou_threshold: f64,
    /// Pairs reported by hard-example mining.
    pub hard_examples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.3, iou_threshold: 0.5, hard_examples: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub categories: Vec<String>,
    pub paths: PathsConfig,
    pub synthesis: SynthesisConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub adversarial: AdversarialConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let categories: Vec<String> = DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect();
        Self {
            seed: 0,
            detector: DetectorConfig { num_classes: categories.len(), ..DetectorConfig::default() },
            categories,
            paths: PathsConfig::default(),
            synthesis: SynthesisConfig::default(),
            train: TrainConfig::default(),
            adversarial: AdversarialConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings for the synthetic-shapes fixture.
    pub fn fixture() -> Self {
        let categories: Vec<String> = FIXTURE_CATEGORIES.iter().map(|s| s.to_string()).collect();
        Self {
            detector: DetectorConfig { num_classes: categories.len(), ..DetectorConfig::default() },
            categories,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("at least one category is required".into()));
        }
        if self.detector.num_classes != self.categories.len() {
            return Err(Error::Config(format!(
                "detector.num_classes is {} but {} categories are configured",
                self.detector.num_classes,
                self.categories.len()
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        let d = self.synthesis.density();
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("fog density must be non-negative, got {d}")));
        }
        if !(0.0..=1.0).contains(&self.synthesis.atmospheric_light) {
            return Err(Error::Config("atmospheric_light must lie in [0, 1]".into()));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.score_threshold) || !(0.0..=1.0).contains(&e.nms_iou) || !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(Error::Config("eval thresholds must lie in [0, 1]".into()));
        }
        self.synthesis.rainmix.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        self.adversarial.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file, resolving relative dataset paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [&mut p.source, &mut p.target, &mut p.auxiliary, &mut p.rain] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }
}
