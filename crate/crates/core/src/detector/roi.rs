//! Fixed-grid average ROI pooling.
//!
//! Each box is split into a `P x P` grid of bins. A bin's value is the mean of
//! `R x R` evenly spaced bilinear samples of the feature map, where feature
//! cell `(i, j)` is centered at `((j + 0.5) * stride, (i + 0.5) * stride)` in
//! image coordinates. When a bin covers whole cells the samples land exactly
//! on cell centers and the bin is the plain average of those cells.

use ndarray::{Array2, Array3};

use super::types::BBox;

/// Precomputed sparse sampling weights for a set of boxes.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    /// Per box: `(bin, cell, weight)` with `cell = y * w + x`.
    entries: Vec<Vec<(usize, usize, f64)>>,
    pool: usize,
    hw: (usize, usize),
}

impl RoiPlan {
    pub fn new(boxes: &[BBox], stride: usize, hw: (usize, usize), pool: usize, sampling: usize) -> Self {
        let (h, w) = hw;
        let s = stride as f64;
        let r = sampling as f64;
        let per_sample = 1.0 / (r * r);
        let entries = boxes
            .iter()
            .map(|b| {
                let (x0, y0) = (b.x1 / s, b.y1 / s);
                let bw = (b.x2 - b.x1) / s / pool as f64;
                let bh = (b.y2 - b.y1) / s / pool as f64;
                let mut list = Vec::with_capacity(pool * pool * sampling * sampling * 4);
                for py in 0..pool {
                    for px in 0..pool {
                        let bin = py * pool + px;
                        for sy in 0..sampling {
                            let v = y0 + (py as f64 + (sy as f64 + 0.5) / r) * bh;
                            for sx in 0..sampling {
                                let u = x0 + (px as f64 + (sx as f64 + 0.5) / r) * bw;
                                bilinear(u - 0.5, v - 0.5, h, w, |cell, wt| {
                                    if wt != 0.0 {
                                        list.push((bin, cell, wt * per_sample));
                                    }
                                });
                            }
                        }
                    }
                }
                list
            })
            .collect();
        Self { entries, pool, hw }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pools `(C, h, w)` features into `(M, C * P * P)` rows laid out channel-major.
    pub fn pool(&self, features: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = features.dim();
        assert_eq!((h, w), self.hw, "feature map size changed since planning");
        let bins = self.pool * self.pool;
        let fs = features.as_standard_layout();
        let src = fs.as_slice().expect("standard layout");
        let mut out = Array2::zeros((self.entries.len(), c * bins));
        for (m, list) in self.entries.iter().enumerate() {
            let mut row = out.row_mut(m);
            let row = row.as_slice_mut().expect("row of standard array");
            for &(bin, cell, wt) in list {
                for ch in 0..c {
                    row[ch * bins + bin] += wt * src[ch * h * w + cell];
                }
            }
        }
        out
    }

    /// Scatters row gradients back onto a `(C, h, w)` feature gradient.
    pub fn backward(&self, dpooled: &Array2<f64>, channels: usize) -> Array3<f64> {
        let (h, w) = self.hw;
        let bins = self.pool * self.pool;
        let mut grad = Array3::zeros((channels, h, w));
        let dst = grad.as_slice_mut().expect("fresh array");
        for (m, list) in self.entries.iter().enumerate() {
            let row = dpooled.row(m);
            for &(bin, cell, wt) in list {
                for ch in 0..channels {
                    dst[ch * h * w + cell] += wt * row[ch * bins + bin];
                }
            }
        }
        grad
    }
}

/// Bilinear interpolation weights at grid position `(x, y)` (cell units,
/// cell `j` at `x = j`), with coordinates clamped into the grid.
fn bilinear(x: f64, y: f64, h: usize, w: usize, mut emit: impl FnMut(usize, f64)) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    emit(y0 * w + x0, (1.0 - fx) * (1.0 - fy));
    emit(y0 * w + x1, fx * (1.0 - fy));
    emit(y1 * w + x0, (1.0 - fx) * fy);
    emit(y1 * w + x1, fx * fy);
}
