//! Pluggable staged feature extractor backing the perceptual loss and the
//! perceptual eval metric.
//!
//! The default backend is a fixed, seed-derived convolutional pyramid: no
//! externally pretrained weights are required to run the suite. Absolute
//! values depend on the backend, so every report labels which backend
//! produced them; acceptance checks using this metric are relative.

use crate::error::Result;
use crate::image::RgbImage;
use crate::nn::blocks::{leaky_relu, Conv2d};
use crate::nn::{device, ParamStore};
use candle_core::Tensor;

/// Four feature stages of decreasing resolution.
pub trait FeatureExtractor {
    /// `x`: `(B, 3, H, W)` in `[0, 1]` -> four feature maps.
    fn stages(&self, x: &Tensor) -> Result<[Tensor; 4]>;
    /// Label recorded in reports.
    fn backend(&self) -> &'static str;
}

/// Fixed random conv pyramid (seed 0xFEA7): 4 stride-2 stages.
pub struct RandomFeatures {
    convs: [Conv2d; 4],
}

pub const RANDOM_FEATURES_SEED: u64 = 0xFEA7;

impl RandomFeatures {
    pub fn new() -> Result<Self> {
        let store = ParamStore::new(RANDOM_FEATURES_SEED);
        let root = store.root().sub("percep");
        let chans = [3usize, 8, 16, 24, 32];
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(Conv2d::new(&root.sub(&format!("c{i}")), chans[i], chans[i + 1], 3, 2, 1)?);
        }
        Ok(Self { convs: convs.try_into().map_err(|_| ()).expect("four convs") })
    }
}

impl FeatureExtractor for RandomFeatures {
    fn stages(&self, x: &Tensor) -> Result<[Tensor; 4]> {
        let s1 = leaky_relu(&self.convs[0].forward(x)?, 0.2)?;
        let s2 = leaky_relu(&self.convs[1].forward(&s1)?, 0.2)?;
        let s3 = leaky_relu(&self.convs[2].forward(&s2)?, 0.2)?;
        let s4 = leaky_relu(&self.convs[3].forward(&s3)?, 0.2)?;
        Ok([s1, s2, s3, s4])
    }

    fn backend(&self) -> &'static str {
        "random-init-v1"
    }
}

/// Perceptual distance: sum over stages of per-element mean L1 between
/// feature maps.
pub fn perceptual_distance(
    extractor: &dyn FeatureExtractor,
    a: &Tensor,
    b: &Tensor,
) -> Result<f64> {
    let fa = extractor.stages(a)?;
    let fb = extractor.stages(b)?;
    let mut total = 0.0f64;
    for (x, y) in fa.iter().zip(fb.iter()) {
        total += (x - y)?.abs()?.mean_all()?.to_scalar::<f32>()? as f64;
    }
    Ok(total)
}

pub fn image_to_tensor(img: &RgbImage) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        img.data().to_vec(),
        (1, 3, img.height, img.width),
        &device(),
    )?)
}

pub fn perceptual_metric(
    extractor: &dyn FeatureExtractor,
    a: &RgbImage,
    b: &RgbImage,
) -> Result<f64> {
    perceptual_distance(extractor, &image_to_tensor(a)?, &image_to_tensor(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_for_identical_and_positive_otherwise() {
        let ex = RandomFeatures::new().unwrap();
        let a = RgbImage::filled(32, 32, [0.2, 0.4, 0.6]);
        let mut b = a.clone();
        for v in b.data_mut().iter_mut().step_by(7) {
            *v = (*v + 0.3).min(1.0);
        }
        assert_eq!(perceptual_metric(&ex, &a, &a).unwrap(), 0.0);
        assert!(perceptual_metric(&ex, &a, &b).unwrap() > 0.0);
    }

    #[test]
    fn weights_are_fixed_across_instances() {
        let e1 = RandomFeatures::new().unwrap();
        let e2 = RandomFeatures::new().unwrap();
        let a = RgbImage::filled(16, 16, [0.9, 0.1, 0.5]);
        let b = RgbImage::filled(16, 16, [0.1, 0.9, 0.5]);
        let d1 = perceptual_metric(&e1, &a, &b).unwrap();
        let d2 = perceptual_metric(&e2, &a, &b).unwrap();
        assert_eq!(d1, d2);
    }
}
