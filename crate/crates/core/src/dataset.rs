//! Dataset layout `root/images/<split>/*.png` with optional
//! `root/annotations/<split>.json`, a flat JSON list of
//! `{"file": ..., "boxes": [{"category": ..., "box": [x1, y1, x2, y2]}]}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adversarial::DomainLabel;
use crate::detector::{BBox, BoxAnnotation, ImageArray};
use crate::error::{Error, Result};
use crate::training::DetectionSample;

/// Classes of the urban-scene benchmark, used when no list is configured.
pub const DEFAULT_CATEGORIES: [&str; 8] = ["bus", "bicycle", "car", "motorcycle", "person", "rider", "train", "truck"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBox {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEntry {
    pub file: String,
    #[serde(default)]
    pub boxes: Vec<RawBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub annotations: Option<Vec<BoxAnnotation>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_dir(&self) -> PathBuf {
        image_dir(&self.root, &self.split)
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.image_dir().join(&entry.file)
    }

    pub fn is_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.annotations.is_some())
    }

    /// Loads every image as a sample of `domain`. Annotations are kept only
    /// for the source domain; target and auxiliary samples never carry them.
    pub fn load_samples(&self, domain: DomainLabel) -> Result<Vec<DetectionSample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(DetectionSample {
                    id: e.file.clone(),
                    image: ImageArray::load(&self.image_path(e))?,
                    annotations: if domain == DomainLabel::Source { e.annotations.clone() } else { None },
                    domain,
                })
            })
            .collect()
    }
}

pub fn image_dir(root: &Path, split: &str) -> PathBuf {
    root.join("images").join(split)
}

pub fn annotation_path(root: &Path, split: &str) -> PathBuf {
    root.join("annotations").join(format!("{split}.json"))
}

/// PNG files of `dir` in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut files: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    Ok(files)
}

/// Validates a raw box against the categories and the image size, clipping
/// it to the image.
pub fn validate_box(raw: &RawBox, categories: &[String], width: f64, height: f64) -> std::result::Result<BoxAnnotation, String> {
    let category = categories
        .iter()
        .position(|c| c == &raw.category)
        .ok_or_else(|| format!("unknown category `{}`", raw.category))?;
    let [x1, y1, x2, y2] = raw.bbox;
    if raw.bbox.iter().any(|v| !v.is_finite()) {
        return Err(format!("non-finite box {:?}", raw.bbox));
    }
    if !(x1 < x2 && y1 < y2) {
        return Err(format!("inverted box {:?}: need x1 < x2 and y1 < y2", raw.bbox));
    }
    let bbox = BBox::new(x1, y1, x2, y2).clip(width, height);
    if !bbox.is_valid() {
        return Err(format!("box {:?} lies outside the {width}x{height} image", raw.bbox));
    }
    Ok(BoxAnnotation { category, bbox })
}

/// Builds a validated manifest for `root/images/<split>`. Entries follow
/// lexicographic file order. With `labeled`, every image needs an entry in
/// `annotations/<split>.json` and every entry needs an image.
pub fn ingest_dataset(root: &Path, split: &str, labeled: bool, categories: &[String]) -> Result<DatasetManifest> {
    let dir = image_dir(root, split);
    let files = list_images(&dir)?;
    let mut entries = Vec::with_capacity(files.len());
    if !labeled {
        entries.extend(files.into_iter().map(|file| ManifestEntry { file, annotations: None }));
    } else {
        let path = annotation_path(root, split);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: Vec<RawEntry> = serde_json::from_str(&text).map_err(|e| Error::Ingestion {
            entry: path.display().to_string(),
            reason: format!("malformed JSON: {e}"),
        })?;
        let mut by_file: BTreeMap<String, RawEntry> = BTreeMap::new();
        for r in raw {
            if by_file.contains_key(&r.file) {
                return Err(Error::Ingestion { entry: r.file, reason: "listed more than once".into() });
            }
            by_file.insert(r.file.clone(), r);
        }
        for name in by_file.keys() {
            if !dir.join(name).is_file() {
                return Err(Error::Ingestion { entry: name.clone(), reason: format!("missing file {}", dir.join(name).display()) });
            }
        }
        for file in files {
            let raw = by_file.get(&file).ok_or_else(|| Error::Ingestion {
                entry: file.clone(),
                reason: format!("image has no entry in {}", path.display()),
            })?;
            let (w, h) = image::image_dimensions(dir.join(&file)).map_err(|e| Error::image(dir.join(&file), e))?;
            let boxes = raw
                .boxes
                .iter()
                .map(|b| validate_box(b, categories, w as f64, h as f64))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|reason| Error::Ingestion { entry: file.clone(), reason })?;
            entries.push(ManifestEntry { file, annotations: Some(boxes) });
        }
    }
    Ok(DatasetManifest { root: root.to_path_buf(), split: split.to_string(), categories: categories.to_vec(), entries })
}

/// Writes `entries` as an annotation file in the flat JSON format.
pub fn write_annotations(path: &Path, entries: &[RawEntry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Converts an instance-id mask into one box per instance, for datasets
/// that ship masks instead of boxes. `classes` maps instance ids to category
/// names; other ids (background, ignored regions) are skipped.
pub fn mask_to_boxes(mask: &Array2<u32>, classes: &BTreeMap<u32, String>) -> Vec<RawBox> {
    let mut extents: BTreeMap<u32, [usize; 4]> = BTreeMap::new();
    for ((y, x), id) in mask.indexed_iter() {
        if !classes.contains_key(id) {
            continue;
        }
        let e = extents.entry(*id).or_insert([x, y, x, y]);
        e[0] = e[0].min(x);
        e[1] = e[1].min(y);
        e[2] = e[2].max(x);
        e[3] = e[3].max(y);
    }
    extents
        .into_iter()
        .map(|(id, [x1, y1, x2, y2])| RawBox {
            category: classes[&id].clone(),
            bbox: [x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> Vec<String> {
        vec!["car".into(), "person".into()]
    }

    fn setup(entries: &str, images: &[&str]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = image_dir(dir.path(), "train");
        std::fs::create_dir_all(&img_dir).unwrap();
        for name in images {
            ImageArray::filled(20, 30, 0.5).unwrap().save_png(&img_dir.join(name)).unwrap();
        }
        let ann = annotation_path(dir.path(), "train");
        std::fs::create_dir_all(ann.parent().unwrap()).unwrap();
        std::fs::write(ann, entries).unwrap();
        dir
    }

    #[test]
    fn ingests_in_lexicographic_order() {
        let dir = setup(
            r#"[{"file": "b.png", "boxes": [{"category": "car", "box": [1, 2, 10, 12]}]},
                {"file": "a.png", "boxes": []}]"#,
            &["b.png", "a.png"],
        );
        let m = ingest_dataset(dir.path(), "train", true, &cats()).unwrap();
        assert_eq!(m.entries.iter().map(|e| e.file.as_str()).collect::<Vec<_>>(), ["a.png", "b.png"]);
        assert_eq!(m.entries[0].annotations, Some(vec![]));
        assert_eq!(m.entries[1].annotations.as_ref().unwrap()[0].bbox, BBox::new(1.0, 2.0, 10.0, 12.0));
        let unlabeled = ingest_dataset(dir.path(), "train", false, &cats()).unwrap();
        assert!(unlabeled.entries.iter().all(|e| e.annotations.is_none()));
    }

    #[test]
    fn boxes_are_clipped_to_the_image() {
        let dir = setup(r#"[{"file": "a.png", "boxes": [{"category": "person", "box": [-5, 2, 50, 12]}]}]"#, &["a.png"]);
        let m = ingest_dataset(dir.path(), "train", true, &cats()).unwrap();
        assert_eq!(m.entries[0].annotations.as_ref().unwrap()[0].bbox, BBox::new(0.0, 2.0, 30.0, 12.0));
    }

    fn ingestion_error(entries: &str, images: &[&str]) -> (String, String) {
        let dir = setup(entries, images);
        match ingest_dataset(dir.path(), "train", true, &cats()) {
            Err(Error::Ingestion { entry, reason }) => (entry, reason),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_offending_entry() {
        let (entry, reason) =
            ingestion_error(r#"[{"file": "a.png", "boxes": [{"category": "car", "box": [10, 2, 5, 12]}]}]"#, &["a.png"]);
        assert_eq!(entry, "a.png");
        assert!(reason.contains("inverted"));
        let (entry, reason) =
            ingestion_error(r#"[{"file": "a.png", "boxes": [{"category": "tram", "box": [1, 2, 5, 12]}]}]"#, &["a.png"]);
        assert_eq!(entry, "a.png");
        assert!(reason.contains("tram"));
        let (entry, reason) = ingestion_error(r#"[{"file": "gone.png", "boxes": []}]"#, &[]);
        assert_eq!(entry, "gone.png");
        assert!(reason.contains("missing file"));
        let (_, reason) = ingestion_error("[{\"file\": ", &["a.png"]);
        assert!(reason.contains("malformed JSON"));
        let (entry, _) = ingestion_error("[]", &["z.png"]);
        assert_eq!(entry, "z.png");
    }

    #[test]
    fn load_samples_strips_labels_outside_the_source_domain() {
        let dir = setup(r#"[{"file": "a.png", "boxes": [{"category": "car", "box": [1, 2, 10, 12]}]}]"#, &["a.png"]);
        let m = ingest_dataset(dir.path(), "train", true, &cats()).unwrap();
        assert!(m.load_samples(DomainLabel::Source).unwrap()[0].annotations.is_some());
        assert!(m.load_samples(DomainLabel::Target).unwrap()[0].annotations.is_none());
    }

    #[test]
    fn masks_become_pixel_edge_boxes() {
        let mut mask = Array2::<u32>::zeros((6, 8));
        mask.slice_mut(ndarray::s![1..3, 2..5]).fill(7);
        mask[[5, 7]] = 9;
        mask[[0, 0]] = 1;
        let classes = BTreeMap::from([(7, "car".to_string()), (9, "person".to_string())]);
        let boxes = mask_to_boxes(&mask, &classes);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].bbox, [2.0, 1.0, 5.0, 3.0]);
        assert_eq!(boxes[1], RawBox { category: "person".into(), bbox: [7.0, 5.0, 8.0, 6.0] });
    }
}
