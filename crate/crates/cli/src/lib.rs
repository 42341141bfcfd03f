//! Command-line workflows. Every command is a plain function so the same code
//! paths can be driven from tests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fogda::adversarial::{lambda_curve, DomainLabel};
use fogda::checkpoint::{load_checkpoint, save_checkpoint};
use fogda::config::RunConfig;
use fogda::dataset::{annotation_path, image_dir, ingest_dataset, list_images, DatasetManifest};
use fogda::evaluation::{evaluate_detections, mine_hard_examples, EvalResult, HardnessPair};
use fogda::fixture::{write_fixture, FixtureConfig};
use fogda::metric::AlignmentMode;
use fogda::synthesis::{image_rng, synthesize_auxiliary, synthesize_fog, FogLevel, RainLibrary, SynthesisRecord};
use fogda::training::{run_training, DetectionSample, Model, TrainingData};
use fogda::ImageArray;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATASETS_FILE: &str = "datasets.json";
pub const EVAL_FILE: &str = "eval.json";
pub const HARD_EXAMPLES_FILE: &str = "hard_examples.json";
pub const LAMBDA_CURVE_FILE: &str = "lambda_curve.tsv";

#[derive(Debug, Parser)]
#[command(name = "fogda", version, about = "Domain-adaptive object detection for adverse weather")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where outputs are written.
    #[arg(long, short = 'o', global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Aligned,
    Unaligned,
}

impl From<ModeArg> for AlignmentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Aligned => AlignmentMode::Aligned,
            ModeArg::Unaligned => AlignmentMode::Unaligned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FogArg {
    Light,
    Medium,
    Dense,
}

impl From<FogArg> for FogLevel {
    fn from(f: FogArg) -> Self {
        match f {
            FogArg::Light => FogLevel::Light,
            FogArg::Medium => FogLevel::Medium,
            FogArg::Dense => FogLevel::Dense,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic-shapes benchmark and a config pointing at it.
    MakeFixture {
        #[arg(long)]
        train_images: Option<usize>,
        #[arg(long)]
        val_images: Option<usize>,
        #[arg(long)]
        rain_maps: Option<usize>,
    },
    /// Fog-corrupted copies of a dataset, annotations mirrored.
    SynthFog {
        /// Dataset root; defaults to the configured source path.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        level: Option<FogArg>,
        /// Explicit density, overriding the level preset.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        atmospheric_light: Option<f64>,
    },
    /// Rain-blended auxiliary copies of a dataset.
    SynthAux {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Rain-map directory; defaults to the configured rain path.
        #[arg(long)]
        rain: Option<PathBuf>,
    },
    /// Train a detector and write a checkpoint and a loss log.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        source_only: bool,
    },
    /// Evaluate a checkpoint on a labeled split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; defaults to the configured target path.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to the configured validation split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Rank aligned clear/adverse pairs by approximated hardness.
    MineHard {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Tabulate the adaptive reversal strength over classifier losses in (0, 2].
    PlotLambda {
        #[arg(long, default_value_t = 1000)]
        points: usize,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::MakeFixture { train_images, val_images, rain_maps } => {
            let mut fx = FixtureConfig::default();
            fx.train_images = train_images.unwrap_or(fx.train_images);
            fx.val_images = val_images.unwrap_or(fx.val_images);
            fx.rain_maps = rain_maps.unwrap_or(fx.rain_maps);
            command_make_fixture(g, &fx).map(drop)
        }
        Command::SynthFog { input, level, density, atmospheric_light } => {
            let mut cfg = load_config(g)?;
            if let Some(l) = level {
                cfg.synthesis.fog_level = l.into();
                cfg.synthesis.fog_density = None;
            }
            if density.is_some() {
                cfg.synthesis.fog_density = density;
            }
            if let Some(a) = atmospheric_light {
                cfg.synthesis.atmospheric_light = a;
            }
            cfg.validate()?;
            let input = input.or(cfg.paths.source.clone()).context("no input dataset: pass --input or set paths.source")?;
            let out = output_or(g, cfg.paths.target.as_deref())?;
            command_synth_fog(&cfg, &input, &out).map(drop)
        }
        Command::SynthAux { input, rain } => {
            let cfg = load_config(g)?;
            let input = input.or(cfg.paths.source.clone()).context("no input dataset: pass --input or set paths.source")?;
            let rain = rain.or(cfg.paths.rain.clone()).context("no rain library: pass --rain or set paths.rain")?;
            let out = output_or(g, cfg.paths.auxiliary.as_deref())?;
            command_synth_aux(&cfg, &input, &rain, &out).map(drop)
        }
        Command::Train { mode, source_only } => {
            let mut cfg = load_config(g)?;
            if let Some(m) = mode {
                cfg.train.mode = m.into();
            }
            cfg.train.source_only |= source_only;
            cfg.validate()?;
            let out = output_or(g, None)?;
            command_train(&cfg, &out).map(drop)
        }
        Command::Eval { checkpoint, dataset, split } => {
            let cfg = g.config.as_ref().map(|_| load_config(g)).transpose()?;
            let ckpt_cfg = load_checkpoint(&checkpoint)?.config;
            let base = cfg.as_ref().unwrap_or(&ckpt_cfg);
            let dataset = dataset.or(base.paths.target.clone()).context("no dataset: pass --dataset or set paths.target")?;
            let split = split.unwrap_or_else(|| base.paths.val_split.clone());
            let out = output_or(g, None)?;
            let result = command_eval(&checkpoint, &dataset, &split, cfg.as_ref(), &out)?;
            println!("{}", result.table());
            Ok(())
        }
        Command::MineHard { checkpoint, source, target, split, k } => {
            let cfg = match &g.config {
                Some(_) => load_config(g)?,
                None => load_checkpoint(&checkpoint)?.config,
            };
            let source = source.or(cfg.paths.source.clone()).context("pass --source or set paths.source")?;
            let target = target.or(cfg.paths.target.clone()).context("pass --target or set paths.target")?;
            let split = split.unwrap_or_else(|| cfg.paths.train_split.clone());
            let k = k.unwrap_or(cfg.eval.hard_examples);
            let out = output_or(g, None)?;
            command_mine_hard(&checkpoint, &source, &target, &split, k, &out).map(drop)
        }
        Command::PlotLambda { points } => {
            let cfg = load_config(g)?;
            let out = output_or(g, None)?;
            command_plot_lambda(&cfg, points, &out).map(drop)
        }
    }
}

/// The configured run (or the defaults) with `--seed` applied.
pub fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_or(g: &GlobalArgs, fallback: Option<&Path>) -> Result<PathBuf> {
    let dir = g
        .output_dir
        .clone()
        .or_else(|| fallback.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Splits present under `root/images`, sorted.
fn splits(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let mut out: Vec<String> = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    out.sort();
    ensure!(!out.is_empty(), "no splits under {}", dir.display());
    Ok(out)
}

pub fn command_make_fixture(g: &GlobalArgs, fx: &FixtureConfig) -> Result<PathBuf> {
    let out = output_or(g, None)?;
    let mut cfg = match &g.config {
        Some(_) => load_config(g)?,
        None => RunConfig::fixture(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    write_fixture(&out, fx, cfg.seed)?;
    cfg.paths.source = Some("source".into());
    cfg.paths.target = Some("foggy".into());
    cfg.paths.auxiliary = Some("auxiliary".into());
    cfg.paths.rain = Some("rain".into());
    cfg.validate()?;
    let path = out.join("config.toml");
    cfg.save(&path)?;
    log::info!("fixture written to {}", out.display());
    Ok(path)
}

fn rel(split: &str, file: &str) -> String {
    format!("images/{split}/{file}")
}

pub fn command_synth_fog(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Vec<SynthesisRecord>> {
    let density = cfg.synthesis.density();
    let light = cfg.synthesis.atmospheric_light;
    let mut records = Vec::new();
    for split in splits(input)? {
        let src_dir = image_dir(input, &split);
        let dst_dir = image_dir(out, &split);
        std::fs::create_dir_all(&dst_dir)?;
        for file in list_images(&src_dir)? {
            let img = ImageArray::load(&src_dir.join(&file))?;
            synthesize_fog(&img, density, light)?.save_png(&dst_dir.join(&file))?;
            records.push(SynthesisRecord {
                source_file: rel(&split, &file),
                output_file: rel(&split, &file),
                seed: cfg.seed,
                parameters: serde_json::json!({ "density": density, "atmospheric_light": light }),
            });
        }
        let ann = annotation_path(input, &split);
        if ann.is_file() {
            let dst = annotation_path(out, &split);
            std::fs::create_dir_all(dst.parent().expect("annotation path has a parent"))?;
            std::fs::copy(&ann, &dst).with_context(|| format!("copying {}", ann.display()))?;
        }
    }
    write_json(&out.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn command_synth_aux(cfg: &RunConfig, input: &Path, rain: &Path, out: &Path) -> Result<Vec<SynthesisRecord>> {
    let library = RainLibrary::load(rain)?;
    let mut records = Vec::new();
    let mut index = 0u64;
    for split in splits(input)? {
        let src_dir = image_dir(input, &split);
        let dst_dir = image_dir(out, &split);
        std::fs::create_dir_all(&dst_dir)?;
        for file in list_images(&src_dir)? {
            let img = ImageArray::load(&src_dir.join(&file))?;
            let mut rng = image_rng(cfg.seed, index);
            let (aux, record) = synthesize_auxiliary(&img, &library, &cfg.synthesis.rainmix, &mut rng)?;
            aux.save_png(&dst_dir.join(&file))?;
            records.push(SynthesisRecord {
                source_file: rel(&split, &file),
                output_file: rel(&split, &file),
                seed: cfg.seed,
                parameters: serde_json::json!({ "stream": index, "auxiliary": record }),
            });
            index += 1;
        }
    }
    write_json(&out.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Orders `samples` like `reference` by file name.
fn align_by_name(reference: &DatasetManifest, samples: Vec<DetectionSample>, what: &str) -> Result<Vec<DetectionSample>> {
    let mut by_id: std::collections::BTreeMap<String, DetectionSample> =
        samples.into_iter().map(|s| (s.id.clone(), s)).collect();
    reference
        .entries
        .iter()
        .map(|e| by_id.remove(&e.file).ok_or_else(|| anyhow!("{what} set has no image `{}`", e.file)))
        .collect()
}

#[derive(Debug, Serialize)]
struct DatasetRecord {
    domain: DomainLabel,
    root: PathBuf,
    split: String,
    files: Vec<String>,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: u64,
}

pub fn command_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let split = &cfg.paths.train_split;
    let source_root = cfg.paths.source.as_ref().context("paths.source is not set")?;
    let source_manifest = ingest_dataset(source_root, split, true, &cfg.categories)?;
    ensure!(!source_manifest.is_empty(), "source split `{split}` is empty");
    let source = source_manifest.load_samples(DomainLabel::Source)?;
    let mut records = vec![record(DomainLabel::Source, &source_manifest)];

    let adapts = cfg.train.adapts();
    let mut target = Vec::new();
    let mut auxiliary = Vec::new();
    let mut library = None;
    if adapts {
        let root = cfg.paths.target.as_ref().context("paths.target is not set")?;
        let manifest = ingest_dataset(root, split, false, &cfg.categories)?;
        target = manifest.load_samples(DomainLabel::Target)?;
        if cfg.train.mode == AlignmentMode::Aligned {
            target = align_by_name(&source_manifest, target, "target")
                .context("aligned mode needs a target image for every source image")?;
        }
        records.push(record(DomainLabel::Target, &manifest));
        if cfg.train.resample_auxiliary {
            let rain = cfg.paths.rain.as_ref().context("resample_auxiliary needs paths.rain")?;
            library = Some(RainLibrary::load(rain)?);
        } else {
            let root = cfg.paths.auxiliary.as_ref().context("paths.auxiliary is not set")?;
            let manifest = ingest_dataset(root, split, false, &cfg.categories)?;
            auxiliary = align_by_name(&source_manifest, manifest.load_samples(DomainLabel::Auxiliary)?, "auxiliary")?;
            records.push(record(DomainLabel::Auxiliary, &manifest));
        }
    }
    write_json(&out.join(DATASETS_FILE), &records)?;

    let model = Model::new(cfg.detector.clone(), &cfg.train, cfg.seed)?;
    let data = TrainingData {
        source: &source,
        target: &target,
        auxiliary: &auxiliary,
        rain: library.as_ref().map(|l| (l, &cfg.synthesis.rainmix)),
    };
    let log_path = out.join(TRAIN_LOG_FILE);
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut writer = BufWriter::new(file);
    let trained = run_training(data, model, &cfg.train, &cfg.adversarial, cfg.seed, Some(&mut writer))?;
    writer.flush()?;
    let checkpoint = out.join(CHECKPOINT_DIR);
    save_checkpoint(&checkpoint, &trained.model, trained.iterations, cfg)?;
    log::info!("checkpoint written to {}", checkpoint.display());
    Ok(TrainOutcome { checkpoint, log: log_path, iterations: trained.iterations })
}

fn record(domain: DomainLabel, m: &DatasetManifest) -> DatasetRecord {
    DatasetRecord {
        domain,
        root: m.root.clone(),
        split: m.split.clone(),
        files: m.entries.iter().map(|e| e.file.clone()).collect(),
    }
}

/// Evaluates the checkpoint's detector. Thresholds come from `config` when
/// given, otherwise from the checkpoint's snapshot.
pub fn command_eval(
    checkpoint: &Path,
    dataset: &Path,
    split: &str,
    config: Option<&RunConfig>,
    out: &Path,
) -> Result<EvalResult> {
    let ckpt = load_checkpoint(checkpoint)?;
    if let Some(c) = config {
        if c.categories != ckpt.meta.categories {
            bail!(
                "category mismatch: checkpoint has {:?}, configuration has {:?}",
                ckpt.meta.categories,
                c.categories
            );
        }
    }
    let eval = config.map(|c| c.eval).unwrap_or(ckpt.config.eval);
    let manifest = ingest_dataset(dataset, split, true, &ckpt.meta.categories)
        .context("evaluation split must be labeled with the checkpoint's categories")?;
    let detector = &ckpt.model.detector;
    let mut detections = Vec::with_capacity(manifest.len());
    let mut groundtruth = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let img = ImageArray::load(&manifest.image_path(entry))?;
        detections.push(detector.detect(&img, eval.score_threshold, eval.nms_iou)?);
        groundtruth.push(entry.annotations.clone().unwrap_or_default());
    }
    let result = evaluate_detections(&ckpt.meta.categories, &detections, &groundtruth, eval.iou_threshold)?;
    write_json(&out.join(EVAL_FILE), &result)?;
    Ok(result)
}

pub fn command_mine_hard(
    checkpoint: &Path,
    source: &Path,
    target: &Path,
    split: &str,
    k: usize,
    out: &Path,
) -> Result<Vec<fogda::evaluation::HardnessRecord>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cats = &ckpt.meta.categories;
    let src = ingest_dataset(source, split, false, cats)?;
    let tgt = ingest_dataset(target, split, false, cats)?;
    let tgt_files: std::collections::BTreeSet<&str> = tgt.entries.iter().map(|e| e.file.as_str()).collect();
    let pairs = src
        .entries
        .iter()
        .map(|e| {
            ensure!(tgt_files.contains(e.file.as_str()), "target split has no image `{}`", e.file);
            Ok(HardnessPair {
                id: e.file.clone(),
                source: ImageArray::load(&src.image_path(e))?,
                target: ImageArray::load(&tgt.image_dir().join(&e.file))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked = mine_hard_examples(&pairs, &ckpt.model.detector, k)?;
    write_json(&out.join(HARD_EXAMPLES_FILE), &ranked)?;
    Ok(ranked)
}

pub fn command_plot_lambda(cfg: &RunConfig, points: usize, out: &Path) -> Result<PathBuf> {
    ensure!(points > 0, "--points must be positive");
    let curve = lambda_curve(&cfg.adversarial, points, 2.0)?;
    let mut text = String::from("l_c\tlambda_adv\n");
    for (l, lam) in curve {
        text.push_str(&format!("{l}\t{lam}\n"));
    }
    let path = out.join(LAMBDA_CURVE_FILE);
    std::fs::write(&path, text)?;
    Ok(path)
}
