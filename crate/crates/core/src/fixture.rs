//! Synthetic-shapes benchmark: colored circles, squares and triangles on
//! textured backgrounds, plus a procedural library of rain-streak maps.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::{BBox, ImageArray};
use crate::error::{Error, Result};
use crate::synthesis::{image_rng, RainMap};

pub const FIXTURE_CATEGORIES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub height: usize,
    pub width: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub rain_maps: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 256,
            train_images: 200,
            val_images: 50,
            min_objects: 1,
            max_objects: 3,
            min_size: 20.0,
            max_size: 44.0,
            rain_maps: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeObject {
    pub category: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Serialize)]
struct AnnotationOut<'a> {
    category: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize)]
struct EntryOut<'a> {
    file: String,
    boxes: Vec<AnnotationOut<'a>>,
}

fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let period = rng.random_range(8.0..40.0);
            (angle.cos() * 2.0 * PI / period, angle.sin() * 2.0 * PI / period, rng.random_range(0.0..2.0 * PI), rng.random_range(0.04..0.1))
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let noise = Array2::from_shape_simple_fn((h, w), || rng.random_range(-0.03..0.03));
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let tex: f64 = gratings
            .iter()
            .map(|&(fx, fy, phase, amp)| amp * (fx * x as f64 + fy * y as f64 + phase).sin())
            .sum();
        (base[c] + tint[c] * tex + noise[[y, x]]).clamp(0.0, 1.0)
    })
}

/// Pixel-center coverage test for a shape of `category` inside `bbox`.
fn covers(category: usize, b: &BBox, px: f64, py: f64) -> bool {
    match category {
        0 => {
            let (cx, cy) = b.center();
            let r = b.width() / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        1 => px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2,
        _ => {
            // apex at top center, base along the bottom edge
            if py < b.y1 || py > b.y2 {
                return false;
            }
            let t = (py - b.y1) / b.height();
            let half = t * b.width() / 2.0;
            let cx = (b.x1 + b.x2) / 2.0;
            (px - cx).abs() <= half
        }
    }
}

fn region_mean(img: &Array3<f64>, b: &BBox) -> [f64; 3] {
    let (y0, y1) = (b.y1.floor() as usize, (b.y2.ceil() as usize).min(img.dim().1));
    let (x0, x1) = (b.x1.floor() as usize, (b.x2.ceil() as usize).min(img.dim().2));
    let n = ((y1 - y0) * (x1 - x0)).max(1) as f64;
    std::array::from_fn(|c| {
        let mut s = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                s += img[[c, y, x]];
            }
        }
        s / n
    })
}

/// One fixture image and its objects, fully determined by `rng`.
pub fn render_scene(cfg: &FixtureConfig, rng: &mut ChaCha8Rng) -> Result<(ImageArray, Vec<ShapeObject>)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = background(h, w, rng);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ShapeObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let category = rng.random_range(0..FIXTURE_CATEGORIES.len());
        let size = rng.random_range(cfg.min_size..=cfg.max_size);
        let x1 = rng.random_range(1.0..(w as f64 - size - 1.0)).floor();
        let y1 = rng.random_range(1.0..(h as f64 - size - 1.0)).floor();
        let bbox = BBox::new(x1, y1, x1 + size, y1 + size);
        if objects.iter().any(|o| crate::evaluation::compute_iou(&o.bbox, &bbox) > 0.05) {
            continue;
        }
        let bg = region_mean(&img, &bbox);
        let color: [f64; 3] = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let diff = (0..3).map(|k| (c[k] - bg[k]).abs()).sum::<f64>() / 3.0;
            if diff >= 0.3 {
                break c;
            }
        };
        for y in (bbox.y1 as usize)..(bbox.y2.ceil() as usize).min(h) {
            for x in (bbox.x1 as usize)..(bbox.x2.ceil() as usize).min(w) {
                if covers(category, &bbox, x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, &v) in color.iter().enumerate() {
                        img[[c, y, x]] = v;
                    }
                }
            }
        }
        objects.push(ShapeObject { category, bbox });
    }
    Ok((ImageArray::new(img)?, objects))
}

/// Thin slanted streaks of random length and brightness, lightly blurred.
pub fn render_rain_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RainMap {
    let mut m = Array2::<f64>::zeros((h, w));
    let base_angle: f64 = rng.random_range(-0.35..0.35);
    let streaks = rng.random_range(120..260);
    for _ in 0..streaks {
        let angle = base_angle + rng.random_range(-0.05..0.05);
        let len = rng.random_range(6.0..22.0);
        let intensity = rng.random_range(0.3..1.0);
        let (x0, y0) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (dx, dy) = (angle.sin(), angle.cos());
        let steps = (len * 2.0) as usize;
        for s in 0..steps {
            let t = s as f64 / 2.0;
            let (x, y) = (x0 + dx * t, y0 + dy * t);
            let (xi, yi) = (x as usize, y as usize);
            if xi < w && yi < h {
                m[[yi, xi]] = f64::max(m[[yi, xi]], intensity);
            }
        }
    }
    let blurred = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut s = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                let wt = if yy == y && xx == x { 4.0 } else { 1.0 };
                s += wt * m[[yy, xx]];
                n += wt;
            }
        }
        s / n
    });
    RainMap::new(blurred.mapv(|v| (1.6 * v).min(1.0))).expect("intensities clipped to [0, 1]")
}

/// Writes `source/images/{train,val}`, `source/annotations/{train,val}.json`
/// and `rain/*.png` under `root`.
pub fn write_fixture(root: &Path, cfg: &FixtureConfig, seed: u64) -> Result<()> {
    if cfg.max_size + 2.0 >= cfg.height.min(cfg.width) as f64 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Config(format!("fixture geometry does not fit: {cfg:?}")));
    }
    let source = root.join("source");
    let mut index = 0u64;
    for (split, n) in [("train", cfg.train_images), ("val", cfg.val_images)] {
        let dir = source.join("images").join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = image_rng(seed, index);
            index += 1;
            let (img, objects) = render_scene(cfg, &mut rng)?;
            let file = format!("{split}_{i:04}.png");
            img.save_png(&dir.join(&file))?;
            entries.push(EntryOut {
                file,
                boxes: objects
                    .iter()
                    .map(|o| AnnotationOut { category: FIXTURE_CATEGORIES[o.category], bbox: o.bbox.to_array() })
                    .collect(),
            });
        }
        let ann_dir = source.join("annotations");
        std::fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        let path = ann_dir.join(format!("{split}.json"));
        let text = serde_json::to_string_pretty(&entries)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let rain = root.join("rain");
    std::fs::create_dir_all(&rain).map_err(|e| Error::io(&rain, e))?;
    for i in 0..cfg.rain_maps {
        let mut rng = image_rng(seed ^ 0x7261_696e, i as u64);
        render_rain_map(96, 192, &mut rng).save_png(&rain.join(format!("streaks_{i:02}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let cfg = FixtureConfig::default();
        let a = render_scene(&cfg, &mut image_rng(3, 9)).unwrap();
        let b = render_scene(&cfg, &mut image_rng(3, 9)).unwrap();
        assert_eq!(a, b);
        assert!(!a.1.is_empty() && a.1.len() <= 3);
        for o in &a.1 {
            assert!(o.bbox.x1 >= 0.0 && o.bbox.x2 <= 256.0 && o.bbox.y2 <= 128.0);
            assert!((20.0..=44.0).contains(&o.bbox.width()));
        }
    }

    #[test]
    fn shapes_are_drawn_inside_their_boxes() {
        let b = BBox::new(10.0, 10.0, 30.0, 30.0);
        for cat in 0..3 {
            assert!(covers(cat, &b, 20.0, 25.0));
            assert!(!covers(cat, &b, 5.0, 5.0));
        }
        // triangle corners are empty, circle corners too
        assert!(!covers(2, &b, 11.0, 11.0));
        assert!(!covers(0, &b, 11.0, 11.0));
        assert!(covers(1, &b, 11.0, 11.0));
    }

    #[test]
    fn rain_maps_are_valid() {
        let m = render_rain_map(32, 48, &mut image_rng(0, 1));
        assert!(m.intensity().iter().any(|&v| v > 0.2));
        assert!(m.intensity().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
