use ndarray::Array3;
use rand::Rng;

use super::types::{FeatureMap, ImageArray};
use crate::error::{Error, Result};
use crate::nn::{join_prefix, relu_backward_inplace, relu_inplace, Conv2d, ConvCache, Param, Parameterized};

/// Plain strided 3x3 conv + ReLU stack. Each layer's stride must be 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    layers: Vec<(ConvCache, Array3<f64>)>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(channels: &[usize], strides: &[usize], rng: &mut R) -> Self {
        assert_eq!(channels.len(), strides.len(), "one stride per layer");
        let mut in_ch = 3;
        let layers = channels
            .iter()
            .zip(strides)
            .map(|(&out, &s)| {
                let conv = Conv2d::he(in_ch, out, 3, s, 1, rng);
                in_ch = out;
                conv
            })
            .collect();
        Self { layers }
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(3, |l| l.out_channels())
    }

    /// Zeroes the last layer's weights and bias.
    pub fn zero_final_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.value.fill(0.0);
            last.bias.value.fill(0.0);
        }
    }

    pub fn forward(&self, image: &ImageArray) -> Result<(FeatureMap, BackboneCache)> {
        let stride = self.stride();
        let (h, w) = (image.height(), image.width());
        if h < stride || w < stride {
            return Err(Error::InvalidInput(format!(
                "{h}x{w} image is smaller than the backbone stride {stride}"
            )));
        }
        let mut x = image.planes().clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (mut y, cache) = layer.forward(&x);
            relu_inplace(&mut y);
            caches.push((cache, y.clone()));
            x = y;
        }
        Ok((
            FeatureMap {
                activations: x,
                stride,
                image_hw: (h, w),
            },
            BackboneCache { layers: caches },
        ))
    }

    pub fn backward(&mut self, cache: &BackboneCache, grad: Array3<f64>) {
        let mut g = grad;
        for (i, (layer, (conv_cache, out))) in self.layers.iter_mut().zip(&cache.layers).enumerate().rev() {
            relu_backward_inplace(&mut g, out);
            match layer.backward(conv_cache, &g, i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }
}

impl Parameterized for Backbone {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join_prefix(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join_prefix(prefix, &format!("conv{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_backbone() -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Backbone::new(&[16, 32, 64, 64, 64], &[2, 2, 2, 2, 1], &mut rng)
    }

    #[test]
    fn feature_shape_follows_ceil_of_stride() {
        let bb = default_backbone();
        assert_eq!(bb.stride(), 16);
        let img = ImageArray::filled(128, 256, 0.3).unwrap();
        let (f, _) = bb.forward(&img).unwrap();
        assert_eq!(f.activations.dim(), (64, 8, 16));
        let odd = ImageArray::filled(40, 50, 0.3).unwrap();
        let (f, _) = bb.forward(&odd).unwrap();
        assert_eq!(f.spatial(), (3, 4));
    }

    #[test]
    fn full_resolution_shape() {
        // Shape arithmetic only: ceil(1024/16) x ceil(2048/16).
        let conv = Conv2d::he(1, 1, 3, 2, 1, &mut ChaCha8Rng::seed_from_u64(0));
        let mut hw = (1024, 2048);
        for _ in 0..4 {
            hw = conv.output_hw(hw.0, hw.1);
        }
        assert_eq!(hw, (64, 128));
    }

    #[test]
    fn zero_image_with_zero_final_layer_gives_zero_features() {
        let mut bb = default_backbone();
        bb.zero_final_layer();
        let img = ImageArray::filled(32, 48, 0.0).unwrap();
        let (f, _) = bb.forward(&img).unwrap();
        assert!(f.activations.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let bb = default_backbone();
        let img = ImageArray::filled(8, 64, 0.5).unwrap();
        assert!(matches!(bb.forward(&img), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let bb = default_backbone();
        let img = ImageArray::from_fn(32, 32, |y, x, c| ((y + 2 * x + c) % 7) as f64 / 7.0).unwrap();
        assert_eq!(bb.forward(&img).unwrap().0, bb.forward(&img).unwrap().0);
    }
}
