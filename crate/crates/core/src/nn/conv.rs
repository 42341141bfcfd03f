use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use super::param::{join, Param, Parameterized};

/// Square-kernel 2-D convolution over a single `(C, H, W)` image, computed
/// with im2col and one matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Param,
    /// `(out_channels, 1)`
    pub bias: Param,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    input_hw: (usize, usize),
}

impl Conv2d {
    pub fn he<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self::normal(in_channels, out_channels, kernel, stride, padding, std, rng)
    }

    pub fn normal<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::normal(out_channels, in_channels * kernel * kernel, std, rng),
            bias: Param::zeros(out_channels, 1),
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        let s = self.stride;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x, ho, wo);
        let mut y = self.weight.value.dot(&cols);
        y += &self.bias.value;
        let y = y
            .into_shape_with_order((self.out_channels(), ho, wo))
            .expect("contiguous product");
        (y, ConvCache { cols, input_hw: (h, w) })
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        dy: &Array3<f64>,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (co, ho, wo) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((co, ho * wo))
            .expect("standard layout gradient");
        general_mat_mul(1.0, &dy2, &cache.cols.t(), 1.0, &mut self.weight.grad);
        let db = dy2.sum_axis(Axis(1));
        self.bias.grad.column_mut(0).scaled_add(1.0, &db);
        if !need_input_grad {
            return None;
        }
        let dcols = self.weight.value.t().dot(&dy2);
        Some(self.col2im(&dcols, cache.input_hw, ho, wo))
    }

    fn im2col(&self, x: &Array3<f64>, ho: usize, wo: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let out = &mut dst[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *o = line[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, (h, w): (usize, usize), ho: usize, wo: usize) -> Array3<f64> {
        let c = self.in_channels;
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut dx = Array3::<f64>::zeros((c, h, w));
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("standard layout");
        let dst = dx.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let inp = &src[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += inp[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
