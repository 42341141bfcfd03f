use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2` for valid boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box and rejects inverted or non-finite coordinates.
    pub fn checked(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::new(x1, y1, x2, y2);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidInput(format!(
                "box ({x1}, {y1}, {x2}, {y2}) needs x1 < x2 and y1 < y2"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// RGB image with values in `[0, 1]`, stored planar as `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    data: Array3<f64>,
}

impl ImageArray {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be (3, H, W) with H, W > 0, got ({c}, {h}, {w})"
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn((3, height, width), |(c, y, x)| f(y, x, c)))
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Planar `(3, H, W)` view.
    pub fn planes(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_planes(self) -> Array3<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize, channel: usize) -> f64 {
        self.data[[channel, y, x]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self::new(data)
    }

    /// Writes an 8-bit RGB PNG (values are rounded to the nearest level).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[c, y as usize, x as usize]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        buf.save(path).map_err(|e| Error::image(path, e))
    }
}

/// Ground-truth box with its category index into the configured category list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAnnotation {
    pub category: usize,
    pub bbox: BBox,
}

/// Backbone output for one image, stored as `(C, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub activations: Array3<f64>,
    pub stride: usize,
    /// Height and width of the image the map was computed from.
    pub image_hw: (usize, usize),
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.activations.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.activations.dim();
        (h, w)
    }

    pub fn is_finite(&self) -> bool {
        self.activations.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Per-proposal object features, one row per proposal in proposal order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatureSet {
    pub features: Array2<f64>,
}

impl ObjectFeatureSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub category: usize,
    pub bbox: BBox,
    pub confidence: f64,
}
