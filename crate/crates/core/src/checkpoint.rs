//! Checkpoint directories: `checkpoint.json` (format version, iteration,
//! categories and a tensor index), `weights.bin` (little-endian f64 values in
//! index order) and `config.toml`, the run configuration snapshot.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::training::Model;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the blob, counted in f64 values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub iteration: u64,
    pub seed: u64,
    pub categories: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: RunConfig,
    pub model: Model,
}

pub fn save_checkpoint(dir: &Path, model: &Model, iteration: u64, config: &RunConfig) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut offset = 0;
    model.visit_params("", &mut |name, p| {
        let (r, c) = p.value.dim();
        tensors.push(TensorEntry { name: name.to_string(), shape: [r, c], offset });
        offset += r * c;
    });
    let path = dir.join(WEIGHTS_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let mut status = Ok(());
    model.visit_params("", &mut |_, p| {
        for &v in p.value.iter() {
            if status.is_ok() {
                status = out.write_f64::<LittleEndian>(v);
            }
        }
    });
    status.and_then(|_| out.flush()).map_err(|e| Error::io(&path, e))?;

    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        iteration,
        seed: config.seed,
        categories: config.categories.clone(),
        tensors,
    };
    let path = dir.join(META_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    config.save(&dir.join(CONFIG_FILE))?;
    Ok(meta)
}

/// Rebuilds the model described by the snapshot and fills in the stored
/// weights. A missing weights blob is reported as an uninitialized model.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config = RunConfig::from_toml(&text)?;
    if config.categories != meta.categories {
        return Err(Error::Checkpoint("categories in checkpoint.json and config.toml differ".into()));
    }

    let path = dir.join(WEIGHTS_FILE);
    if !path.is_file() {
        return Err(Error::NotInitialized(format!("no weights blob at {}", path.display())));
    }
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut values = Vec::new();
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(|e| Error::io(&path, e))?;
    if buf.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{} is truncated", path.display())));
    }
    let mut cursor = buf.as_slice();
    while !cursor.is_empty() {
        values.push(cursor.read_f64::<LittleEndian>().map_err(|e| Error::io(&path, e))?);
    }

    let mut model = Model::new(config.detector.clone(), &config.train, config.seed)?;
    let index: BTreeMap<&str, &TensorEntry> = meta.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problem: Option<String> = None;
    let mut seen = 0;
    model.visit_params_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        let Some(t) = index.get(name) else {
            problem = Some(format!("tensor `{name}` missing from the index"));
            return;
        };
        let (r, c) = p.value.dim();
        if t.shape != [r, c] {
            problem = Some(format!("tensor `{name}` has shape {:?}, model expects [{r}, {c}]", t.shape));
            return;
        }
        let Some(slice) = values.get(t.offset..t.offset + r * c) else {
            problem = Some(format!("tensor `{name}` lies past the end of the blob"));
            return;
        };
        p.value.iter_mut().zip(slice).for_each(|(dst, &src)| *dst = src);
        seen += 1;
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if seen != meta.tensors.len() {
        return Err(Error::Checkpoint(format!("index lists {} tensors, model has {seen}", meta.tensors.len())));
    }
    Ok(Checkpoint { meta, config, model })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::fixture();
        cfg.detector.backbone_channels = vec![4, 4, 4, 4, 4];
        cfg.detector.head_hidden = 8;
        cfg.train.image_classifier_hidden = 4;
        cfg.train.object_classifier_hidden = [8, 4];
        cfg
    }

    #[test]
    fn round_trip_preserves_every_weight() {
        let cfg = small_config();
        let mut model = Model::new(cfg.detector.clone(), &cfg.train, 1).unwrap();
        model.visit_params_mut("", &mut |_, p| p.value.mapv_inplace(|v| v * 1.5 + 1e-3));
        let dir = tempfile::tempdir().unwrap();
        let meta = save_checkpoint(dir.path(), &model, 42, &cfg).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.meta.iteration, 42);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.model, model);
    }

    #[test]
    fn missing_blob_is_not_initialized() {
        let cfg = small_config();
        let model = Model::new(cfg.detector.clone(), &cfg.train, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 0, &cfg).unwrap();
        std::fs::remove_file(dir.path().join(WEIGHTS_FILE)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::NotInitialized(_))));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let cfg = small_config();
        let model = Model::new(cfg.detector.clone(), &cfg.train, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 0, &cfg).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
