//! Weather synthesis: the rain-streak auxiliary domain and a uniform-depth
//! fog corruption used to build a foggy target domain.
//!
//! Every random choice is drawn from a per-image stream
//! ([`image_rng`]) so outputs do not depend on processing order.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::detector::ImageArray;
use crate::error::{Error, Result};

/// Independent random stream for image `index` under a global seed.
pub fn image_rng(global_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(index);
    rng
}

/// Single-channel rain intensity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RainMap {
    intensity: Array2<f64>,
}

impl RainMap {
    pub fn new(intensity: Array2<f64>) -> Result<Self> {
        if intensity.is_empty() {
            return Err(Error::InvalidInput("rain map must be non-empty".into()));
        }
        if let Some(v) = intensity.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("rain intensity {v} outside [0, 1]")));
        }
        Ok(Self { intensity: intensity.as_standard_layout().into_owned() })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { intensity: Array2::zeros((height, width)) }
    }

    pub fn intensity(&self) -> &Array2<f64> {
        &self.intensity
    }

    pub fn height(&self) -> usize {
        self.intensity.nrows()
    }

    pub fn width(&self) -> usize {
        self.intensity.ncols()
    }

    /// Grayscale image scaled by the bit depth's maximum value.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma16();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] as f64 / u16::MAX as f64
        });
        Self::new(data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Luma([(self.intensity[[y as usize, x as usize]] * 255.0).round() as u8])
        });
        buf.save(path).map_err(|e| Error::image(path, e))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.intensity.dim() {
            return self.clone();
        }
        let (h, w) = self.intensity.dim();
        let sy = h as f64 / height as f64;
        let sx = w as f64 / width as f64;
        let src = &self.intensity;
        let out = Array2::from_shape_fn((height, width), |(y, x)| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            (1.0 - ty) * ((1.0 - tx) * src[[y0, x0]] + tx * src[[y0, x1]])
                + ty * ((1.0 - tx) * src[[y1, x0]] + tx * src[[y1, x1]])
        });
        Self { intensity: out.mapv(|v| v.clamp(0.0, 1.0)) }
    }
}

/// Rain-streak maps loaded from a directory of grayscale PNGs.
#[derive(Debug, Clone)]
pub struct RainLibrary {
    maps: Vec<RainMap>,
    files: Vec<PathBuf>,
}

impl RainLibrary {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!("rain library {} contains no PNG maps", dir.display())));
        }
        let maps = files.iter().map(|f| RainMap::load(f)).collect::<Result<_>>()?;
        Ok(Self { maps, files })
    }

    pub fn from_maps(maps: Vec<RainMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Config("rain library is empty".into()));
        }
        let files = (0..maps.len()).map(|i| PathBuf::from(format!("<memory:{i}>"))).collect();
        Ok(Self { maps, files })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn file(&self, index: usize) -> &Path {
        &self.files[index]
    }

    pub fn map(&self, index: usize) -> &RainMap {
        &self.maps[index]
    }
}

/// Uniformly chosen map index and map.
pub fn sample_rain_map<'a, R: Rng + ?Sized>(library: &'a RainLibrary, rng: &mut R) -> (usize, &'a RainMap) {
    let i = rng.random_range(0..library.len());
    (i, &library.maps[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainMixConfig {
    pub chains: usize,
    pub max_depth: usize,
    pub rotate_degrees: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    /// Fraction of the map size.
    pub translate: f64,
    pub shear_degrees: f64,
    /// Range of the weight kept by the mixed map against the original.
    pub skip_min: f64,
    pub skip_max: f64,
    pub blend_min: f64,
    pub blend_max: f64,
}

impl Default for RainMixConfig {
    fn default() -> Self {
        Self {
            chains: 3,
            max_depth: 3,
            rotate_degrees: 30.0,
            zoom_min: 0.8,
            zoom_max: 1.2,
            translate: 0.1,
            shear_degrees: 10.0,
            skip_min: 0.5,
            skip_max: 1.0,
            blend_min: 0.5,
            blend_max: 1.0,
        }
    }
}

impl RainMixConfig {
    /// Every transform collapses to the identity.
    pub fn identity() -> Self {
        Self {
            rotate_degrees: 0.0,
            zoom_min: 1.0,
            zoom_max: 1.0,
            translate: 0.0,
            shear_degrees: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.chains >= 1
            && self.max_depth >= 1
            && self.rotate_degrees >= 0.0
            && 0.0 < self.zoom_min
            && self.zoom_min <= self.zoom_max
            && self.translate >= 0.0
            && (0.0..90.0).contains(&self.shear_degrees)
            && 0.0 <= self.skip_min
            && self.skip_min <= self.skip_max
            && self.skip_max <= 1.0
            && 0.0 <= self.blend_min
            && self.blend_min <= self.blend_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid rainmix configuration {self:?}")))
        }
    }
}

/// 2x3 affine matrix `[a b tx; c d ty]` acting on pixel-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    /// `self` after `first`.
    pub fn compose(&self, first: &Affine) -> Affine {
        let a = self.0;
        let b = first.0;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine(out)
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b, tx], [c, d, ty]] = self.0;
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Affine([[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// Linear part `[[a, b], [c, d]]` applied about the center `(cx, cy)`.
    fn about(linear: [[f64; 2]; 2], cx: f64, cy: f64) -> Affine {
        let [[a, b], [c, d]] = linear;
        Affine([[a, b, cx - a * cx - b * cy], [c, d, cy - c * cx - d * cy]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    /// Counter-clockwise as displayed (y axis pointing down).
    Rotate { degrees: f64 },
    Zoom { factor: f64 },
    /// Offsets as fractions of width and height.
    Translate { dx: f64, dy: f64 },
    /// Horizontal shear.
    Shear { degrees: f64 },
}

impl Transform {
    pub fn matrix(&self, height: usize, width: usize) -> Affine {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        match *self {
            Transform::Rotate { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                Affine::about([[c, s], [-s, c]], cx, cy)
            }
            Transform::Zoom { factor } => Affine::about([[factor, 0.0], [0.0, factor]], cx, cy),
            Transform::Translate { dx, dy } => {
                Affine([[1.0, 0.0, dx * width as f64], [0.0, 1.0, dy * height as f64]])
            }
            Transform::Shear { degrees } => Affine::about([[1.0, degrees.to_radians().tan()], [0.0, 1.0]], cx, cy),
        }
    }

    fn sample<R: Rng + ?Sized>(cfg: &RainMixConfig, rng: &mut R) -> Self {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        match rng.random_range(0..4) {
            0 => Transform::Rotate { degrees: sym(rng, cfg.rotate_degrees) },
            1 => Transform::Zoom {
                factor: if cfg.zoom_max > cfg.zoom_min { rng.random_range(cfg.zoom_min..=cfg.zoom_max) } else { cfg.zoom_min },
            },
            2 => Transform::Translate { dx: sym(rng, cfg.translate), dy: sym(rng, cfg.translate) },
            _ => Transform::Shear { degrees: sym(rng, cfg.shear_degrees) },
        }
    }
}

/// Warps `map` so that source pixel `p` lands at `m(p)`; bilinear sampling,
/// zero outside the map.
pub fn warp_affine(map: &RainMap, m: &Affine) -> RainMap {
    let (h, w) = map.intensity.dim();
    let inv = m.inverse();
    let src = &map.intensity;
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[[y as usize, x as usize]]
        }
    };
    let out = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        // snap values within rounding noise of a grid point
        let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
        let (sx, sy) = (snap(sx), snap(sy));
        let (x0, y0) = (sx.floor(), sy.floor());
        let (tx, ty) = (sx - x0, sy - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v = (1.0 - ty) * ((1.0 - tx) * at(yi, xi) + tx * at(yi, xi + 1))
            + ty * ((1.0 - tx) * at(yi + 1, xi) + tx * at(yi + 1, xi + 1));
        v.clamp(0.0, 1.0)
    });
    RainMap { intensity: out }
}

/// Parameters drawn by one [`rainmix_transform`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainMixRecord {
    pub chains: Vec<Vec<Transform>>,
    pub chain_weights: Vec<f64>,
    pub skip_weight: f64,
}

/// Mixes `k` randomly transformed copies of `map` with Dirichlet(1) weights
/// and blends the mix back with the original: `m * mix + (1 - m) * map`.
pub fn rainmix_transform<R: Rng + ?Sized>(map: &RainMap, cfg: &RainMixConfig, rng: &mut R) -> (RainMap, RainMixRecord) {
    let (h, w) = map.intensity.dim();
    let raw: Vec<f64> = (0..cfg.chains).map(|_| Exp1.sample(rng)).collect();
    let norm: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let mut mix = Array2::<f64>::zeros((h, w));
    let mut chains = Vec::with_capacity(cfg.chains);
    for &wt in &weights {
        let depth = rng.random_range(1..=cfg.max_depth);
        let ops: Vec<Transform> = (0..depth).map(|_| Transform::sample(cfg, rng)).collect();
        let m = ops
            .iter()
            .fold(Affine::IDENTITY, |acc, t| t.matrix(h, w).compose(&acc));
        let warped = if m == Affine::IDENTITY { map.clone() } else { warp_affine(map, &m) };
        mix.scaled_add(wt, &warped.intensity);
        chains.push(ops);
    }
    let skip = if cfg.skip_max > cfg.skip_min { rng.random_range(cfg.skip_min..=cfg.skip_max) } else { cfg.skip_min };
    let out = (mix * skip + &map.intensity * (1.0 - skip)).mapv(|v| v.clamp(0.0, 1.0));
    (RainMap { intensity: out }, RainMixRecord { chains, chain_weights: weights, skip_weight: skip })
}

/// `clip(source + weight * map, 0, 1)` with the map broadcast over channels.
pub fn blend_rain_with_weight(source: &ImageArray, map: &RainMap, weight: f64) -> Result<ImageArray> {
    if (source.height(), source.width()) != map.intensity.dim() {
        return Err(Error::Contract(format!(
            "rain map {:?} does not match image {}x{}",
            map.intensity.dim(),
            source.height(),
            source.width()
        )));
    }
    let mut data = source.planes().clone();
    for mut plane in data.outer_iter_mut() {
        plane.scaled_add(weight, &map.intensity);
        plane.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    ImageArray::new(data)
}

/// Blends with a weight drawn from `[blend_min, blend_max]`; returns the weight.
pub fn blend_rain<R: Rng + ?Sized>(
    source: &ImageArray,
    map: &RainMap,
    cfg: &RainMixConfig,
    rng: &mut R,
) -> Result<(ImageArray, f64)> {
    let w = if cfg.blend_max > cfg.blend_min { rng.random_range(cfg.blend_min..=cfg.blend_max) } else { cfg.blend_min };
    Ok((blend_rain_with_weight(source, map, w)?, w))
}

/// Everything drawn while synthesizing one auxiliary image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryRecord {
    pub rain_map: String,
    pub rainmix: RainMixRecord,
    pub blend_weight: f64,
}

/// Sample, resize, transform and blend a rain map onto `source`. The source
/// itself is never moved, so the result stays pixel-aligned with it.
pub fn synthesize_auxiliary<R: Rng + ?Sized>(
    source: &ImageArray,
    library: &RainLibrary,
    cfg: &RainMixConfig,
    rng: &mut R,
) -> Result<(ImageArray, AuxiliaryRecord)> {
    let (index, map) = sample_rain_map(library, rng);
    let map = map.resize(source.height(), source.width());
    let (mixed, rainmix) = rainmix_transform(&map, cfg, rng);
    let (image, blend_weight) = blend_rain(source, &mixed, cfg, rng)?;
    let rain_map = library
        .file(index)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((image, AuxiliaryRecord { rain_map, rainmix, blend_weight }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FogLevel {
    Light,
    Medium,
    Dense,
}

impl FogLevel {
    pub fn density(self) -> f64 {
        match self {
            FogLevel::Light => 0.5,
            FogLevel::Medium => 1.0,
            FogLevel::Dense => 1.5,
        }
    }
}

pub const DEFAULT_ATMOSPHERIC_LIGHT: f64 = 0.8;

/// Atmospheric scattering with uniform transmittance `t = exp(-density)`:
/// `out = source * t + light * (1 - t)`.
pub fn synthesize_fog(source: &ImageArray, density: f64, atmospheric_light: f64) -> Result<ImageArray> {
    if !(density >= 0.0) {
        return Err(Error::InvalidInput(format!("fog density must be non-negative, got {density}")));
    }
    if !(0.0..=1.0).contains(&atmospheric_light) {
        return Err(Error::InvalidInput(format!("atmospheric light must lie in [0, 1], got {atmospheric_light}")));
    }
    let t = (-density).exp();
    let data: Array3<f64> = source
        .planes()
        .mapv(|v| (v * t + atmospheric_light * (1.0 - t)).clamp(0.0, 1.0));
    ImageArray::new(data)
}

/// One line of a synthesis manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub source_file: String,
    pub output_file: String,
    pub seed: u64,
    pub parameters: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ramp_map(h: usize, w: usize) -> RainMap {
        RainMap::new(Array2::from_shape_fn((h, w), |(y, x)| ((y * w + x) % 11) as f64 / 10.0)).unwrap()
    }

    #[test]
    fn singleton_library_always_returns_its_map() {
        let lib = RainLibrary::from_maps(vec![ramp_map(4, 4)]).unwrap();
        let mut rng = image_rng(1, 0);
        for _ in 0..20 {
            assert_eq!(sample_rain_map(&lib, &mut rng).0, 0);
        }
        assert!(RainLibrary::from_maps(vec![]).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let lib = RainLibrary::from_maps((0..4).map(|_| RainMap::zeros(2, 2)).collect()).unwrap();
        let mut rng = image_rng(7, 3);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_rain_map(&lib, &mut rng).0] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn identity_transforms_leave_map_unchanged() {
        let map = ramp_map(6, 9);
        let (out, rec) = rainmix_transform(&map, &RainMixConfig::identity(), &mut image_rng(3, 1));
        assert_eq!(rec.chains.len(), 3);
        for (a, b) in out.intensity().iter().zip(map.intensity()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rainmix_is_seed_deterministic() {
        let map = ramp_map(16, 20);
        let cfg = RainMixConfig::default();
        let a = rainmix_transform(&map, &cfg, &mut image_rng(5, 2));
        let b = rainmix_transform(&map, &cfg, &mut image_rng(5, 2));
        assert_eq!(a, b);
        let c = rainmix_transform(&map, &cfg, &mut image_rng(5, 3));
        assert_ne!(a.0, c.0);
        assert!(a.0.intensity().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quarter_turn_matches_hand_rotation() {
        let map = RainMap::new(array![[0.1, 0.2], [0.3, 0.4]]).unwrap();
        let out = warp_affine(&map, &Transform::Rotate { degrees: 90.0 }.matrix(2, 2));
        let expected = array![[0.2, 0.4], [0.1, 0.3]];
        for (a, b) in out.intensity().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{:?}", out.intensity());
        }
    }

    #[test]
    fn affine_compose_and_inverse() {
        let a = Transform::Rotate { degrees: 17.0 }.matrix(10, 14);
        let b = Transform::Shear { degrees: 8.0 }.matrix(10, 14);
        let ab = a.compose(&b);
        let (x, y) = ab.apply(3.0, 4.0);
        let (bx, by) = b.apply(3.0, 4.0);
        let (ex, ey) = a.apply(bx, by);
        assert!((x - ex).abs() < 1e-12 && (y - ey).abs() < 1e-12);
        let (rx, ry) = ab.inverse().apply(x, y);
        assert!((rx - 3.0).abs() < 1e-12 && (ry - 4.0).abs() < 1e-12);
    }

    #[test]
    fn translation_shifts_content() {
        let map = RainMap::new(Array2::from_shape_fn((4, 10), |(_, x)| if x == 2 { 1.0 } else { 0.0 })).unwrap();
        let out = warp_affine(&map, &Transform::Translate { dx: 0.3, dy: 0.0 }.matrix(4, 10));
        assert!(out.intensity().column(5).iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(out.intensity().column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blend_examples() {
        let src = ImageArray::filled(3, 4, 0.2).unwrap();
        assert_eq!(blend_rain_with_weight(&src, &RainMap::zeros(3, 4), 0.8).unwrap(), src);
        let white = ImageArray::filled(3, 4, 1.0).unwrap();
        let full = RainMap::new(Array2::from_elem((3, 4), 1.0)).unwrap();
        assert_eq!(blend_rain_with_weight(&white, &full, 0.7).unwrap(), white);
        let half = RainMap::new(Array2::from_elem((3, 4), 0.5)).unwrap();
        let out = blend_rain_with_weight(&src, &half, 0.6).unwrap();
        assert!(out.planes().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(matches!(blend_rain_with_weight(&src, &RainMap::zeros(2, 4), 0.6), Err(Error::Contract(_))));
    }

    #[test]
    fn blend_weight_is_in_range() {
        let src = ImageArray::filled(2, 2, 0.1).unwrap();
        let mut rng = image_rng(0, 0);
        for _ in 0..100 {
            let (_, w) = blend_rain(&src, &RainMap::zeros(2, 2), &RainMixConfig::default(), &mut rng).unwrap();
            assert!((0.5..=1.0).contains(&w));
        }
    }

    #[test]
    fn fog_examples() {
        let src = ImageArray::from_fn(4, 5, |y, x, c| ((y + x + c) % 5) as f64 / 4.0).unwrap();
        assert_eq!(synthesize_fog(&src, 0.0, 0.7).unwrap(), src);
        let thick = synthesize_fog(&src, 1e4, 0.7).unwrap();
        assert!(thick.planes().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let px = ImageArray::filled(1, 1, 0.4).unwrap();
        let out = synthesize_fog(&px, 0.5f64.ln().abs(), 1.0).unwrap();
        assert!((out.pixel(0, 0, 0) - 0.7).abs() < 1e-12);
        assert!((synthesize_fog(&px, 0.693, 1.0).unwrap().pixel(0, 0, 1) - 0.7).abs() < 1e-4);
        assert!(synthesize_fog(&px, -1.0, 0.5).is_err());
        assert!(synthesize_fog(&px, 1.0, 1.5).is_err());
    }

    #[test]
    fn resize_preserves_constant_maps_and_range() {
        let c = RainMap::new(Array2::from_elem((5, 7), 0.3)).unwrap().resize(12, 3);
        assert_eq!(c.intensity().dim(), (12, 3));
        assert!(c.intensity().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn auxiliary_pipeline_is_pure() {
        let lib = RainLibrary::from_maps(vec![ramp_map(8, 8), ramp_map(5, 12)]).unwrap();
        let src = ImageArray::from_fn(16, 32, |y, x, c| ((y * 3 + x + c) % 7) as f64 / 6.0).unwrap();
        let cfg = RainMixConfig::default();
        let a = synthesize_auxiliary(&src, &lib, &cfg, &mut image_rng(11, 4)).unwrap();
        let b = synthesize_auxiliary(&src, &lib, &cfg, &mut image_rng(11, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.0.height(), a.0.width()), (16, 32));
        // additive rain never darkens: alignment with the source is preserved
        for (o, s) in a.0.planes().iter().zip(src.planes()) {
            assert!(o >= s);
        }
    }
}
