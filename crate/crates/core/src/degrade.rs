//! Randomized second-order degradation: a shuffled, skippable chain of
//! blur, resize jitter, noise and JPEG compression, followed by a fixed
//! resize to the LR target size.
//!
//! The parameter table below is pinned here for reproducibility. Two range
//! sets are provided; when `pipeline_mix` is on, each sample draws one of
//! the two with equal probability.
//!
//! | stage  | set A (default)            | set B (`pipeline_mix`)        |
//! |--------|----------------------------|-------------------------------|
//! | blur   | sigma 0.2..2.0, aniso 30%  | sigma 0.2..3.0, aniso 50%     |
//! | resize | factor 0.8..1.2            | factor 0.5..1.5               |
//! | noise  | sigma 1..8 (of 255)        | sigma 1..15 (of 255)          |
//! | jpeg   | quality 60..95             | quality 30..95                |
//!
//! All stages run in floating point except compression, which operates on
//! 8-bit encoded images by design.

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::resample::{resize_rgb, Filter};
use crate::synth::{derive_seed, TextSample};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    pub scale: usize,
    pub blur_skip: f32,
    pub blur_sigma: [f32; 2],
    pub blur_aniso_prob: f32,
    pub resize_skip: f32,
    pub resize_factor: [f32; 2],
    pub noise_skip: f32,
    /// Noise sigma range on the 0..255 scale.
    pub noise_sigma: [f32; 2],
    pub noise_gray_prob: f32,
    pub jpeg_skip: f32,
    pub jpeg_quality: [u8; 2],
    /// Shuffle stage order per sample (fixed blur-resize-noise-jpeg otherwise).
    pub shuffle: bool,
    /// Draw between range set A and a harsher set B with equal probability.
    pub pipeline_mix: bool,
    /// HR-side color jitter applied before degradation.
    pub color_jitter: bool,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            blur_skip: 0.15,
            blur_sigma: [0.2, 2.0],
            blur_aniso_prob: 0.3,
            resize_skip: 0.25,
            resize_factor: [0.8, 1.2],
            noise_skip: 0.2,
            noise_sigma: [1.0, 8.0],
            noise_gray_prob: 0.4,
            jpeg_skip: 0.25,
            jpeg_quality: [60, 95],
            shuffle: true,
            pipeline_mix: false,
            color_jitter: false,
        }
    }
}

impl DegradeConfig {
    /// A configuration with every randomized stage disabled: the output is
    /// exactly the reference downsample.
    pub fn clean(scale: usize) -> Self {
        Self {
            scale,
            blur_skip: 1.0,
            resize_skip: 1.0,
            noise_skip: 1.0,
            jpeg_skip: 1.0,
            shuffle: false,
            pipeline_mix: false,
            color_jitter: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::config(format!("scale {} not in {{2, 4}}", self.scale)));
        }
        if self.blur_sigma[0] > self.blur_sigma[1]
            || self.resize_factor[0] > self.resize_factor[1]
            || self.noise_sigma[0] > self.noise_sigma[1]
            || self.jpeg_quality[0] > self.jpeg_quality[1]
        {
            return Err(Error::config("degenerate degradation range"));
        }
        Ok(())
    }

    fn harsher(&self) -> Self {
        Self {
            blur_sigma: [0.2, 3.0],
            blur_aniso_prob: 0.5,
            resize_factor: [0.5, 1.5],
            noise_sigma: [1.0, 15.0],
            jpeg_quality: [30, 95],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Blur,
    Resize,
    Noise,
    Jpeg,
}

/// Realized parameters of one executed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageLog {
    ColorJitter { brightness: f32, contrast: f32, saturation: f32 },
    Blur { sigma_x: f32, sigma_y: f32, theta_deg: f32 },
    Resize { factor: f32, filter: Filter },
    Noise { sigma: f32, gray: bool },
    Jpeg { quality: u8 },
}

/// Per-sample record of the realized chain, for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLog {
    pub scale: usize,
    pub seed: u64,
    pub stages: Vec<StageLog>,
}

fn gaussian_kernel_2d(sigma_x: f32, sigma_y: f32, theta_deg: f32, radius: usize) -> Vec<f32> {
    let n = 2 * radius + 1;
    let (s, c) = (theta_deg as f64).to_radians().sin_cos();
    let (sx2, sy2) = ((sigma_x as f64).powi(2), (sigma_y as f64).powi(2));
    let mut k = vec![0.0f32; n * n];
    let mut sum = 0.0f64;
    for iy in 0..n {
        for ix in 0..n {
            let x = ix as f64 - radius as f64;
            let y = iy as f64 - radius as f64;
            let u = c * x + s * y;
            let v = -s * x + c * y;
            let val = (-0.5 * (u * u / sx2 + v * v / sy2)).exp();
            k[iy * n + ix] = val as f32;
            sum += val;
        }
    }
    for v in &mut k {
        *v = (*v as f64 / sum) as f32;
    }
    k
}

fn convolve_2d(img: &RgbImage, kernel: &[f32], radius: usize) -> RgbImage {
    let n = 2 * radius + 1;
    let (h, w) = (img.height, img.width);
    let mut out = RgbImage::new(h, w);
    for ch in 0..3 {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for ky in 0..n {
                    let sy = (y + ky).saturating_sub(radius).min(h - 1);
                    let row = &src[sy * w..sy * w + w];
                    let krow = &kernel[ky * n..ky * n + n];
                    for (kx, &kv) in krow.iter().enumerate() {
                        let sx = (x + kx).saturating_sub(radius).min(w - 1);
                        acc += kv * row[sx];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

fn add_noise(img: &mut RgbImage, sigma: f32, gray: bool, rng: &mut ChaCha12Rng) {
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    if gray {
        let noise: Vec<f32> = (0..hw).map(|_| randn(rng) * sigma).collect();
        for c in 0..3 {
            let plane = img.plane_mut(c);
            for (v, n) in plane.iter_mut().zip(&noise) {
                *v = (*v + n).clamp(0.0, 1.0);
            }
        }
    } else {
        for c in 0..3 {
            let plane = img.plane_mut(c);
            for v in plane.iter_mut() {
                *v = (*v + randn(rng) * sigma).clamp(0.0, 1.0);
            }
        }
    }
}

/// Standard normal via Box-Muller (kept local: candle's CPU RNG is not
/// seedable and `rand_distr` would be a dependency for one function).
pub fn randn(rng: &mut ChaCha12Rng) -> f32 {
    let u1: f32 = rng.gen_range(1e-7f32..1.0);
    let u2: f32 = rng.gen_range(0.0f32..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let rgb8 = img.to_rgb8();
    let mut buf = Vec::new();
    let mut encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    encoder.encode_image(&rgb8)?;
    let decoded = image::load_from_memory(&buf)?.to_rgb8();
    Ok(RgbImage::from_rgb8(&decoded))
}

fn color_jitter(img: &mut RgbImage, rng: &mut ChaCha12Rng) -> StageLog {
    let brightness = rng.gen_range(-0.08f32..=0.08);
    let contrast = rng.gen_range(0.9f32..=1.1);
    let saturation = rng.gen_range(0.8f32..=1.2);
    let (h, w) = (img.height, img.width);
    for i in 0..h * w {
        let r = img.data()[i];
        let g = img.data()[h * w + i];
        let b = img.data()[2 * h * w + i];
        let mean = (r + g + b) / 3.0;
        let adj = |v: f32| {
            let v = mean + (v - mean) * saturation;
            ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0)
        };
        img.data_mut()[i] = adj(r);
        img.data_mut()[h * w + i] = adj(g);
        img.data_mut()[2 * h * w + i] = adj(b);
    }
    StageLog::ColorJitter { brightness, contrast, saturation }
}

/// Degrade one HR image to its LR counterpart.
pub fn degrade(hr: &RgbImage, cfg: &DegradeConfig, rng: &mut ChaCha12Rng) -> Result<(RgbImage, Vec<StageLog>)> {
    cfg.validate()?;
    if hr.height % cfg.scale != 0 || hr.width % cfg.scale != 0 {
        return Err(Error::invalid(format!(
            "HR {}x{} not divisible by scale {}",
            hr.height, hr.width, cfg.scale
        )));
    }
    let cfg = if cfg.pipeline_mix && rng.gen_bool(0.5) { cfg.harsher() } else { cfg.clone() };

    let mut order = [StageKind::Blur, StageKind::Resize, StageKind::Noise, StageKind::Jpeg];
    if cfg.shuffle {
        order.shuffle(rng);
    }

    let (lr_h, lr_w) = (hr.height / cfg.scale, hr.width / cfg.scale);
    let mut img = hr.clone();
    let mut log = Vec::new();
    for stage in order {
        match stage {
            StageKind::Blur => {
                if rng.gen_range(0.0f32..1.0) < cfg.blur_skip {
                    continue;
                }
                let iso = rng.gen_range(0.0f32..1.0) >= cfg.blur_aniso_prob;
                let sigma_x = rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
                let (sigma_y, theta) = if iso {
                    (sigma_x, 0.0)
                } else {
                    (rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]), rng.gen_range(0.0f32..180.0))
                };
                let radius = ((3.0 * sigma_x.max(sigma_y)).ceil() as usize).clamp(1, 10);
                let kernel = gaussian_kernel_2d(sigma_x, sigma_y, theta, radius);
                img = convolve_2d(&img, &kernel, radius);
                log.push(StageLog::Blur { sigma_x, sigma_y, theta_deg: theta });
            }
            StageKind::Resize => {
                if rng.gen_range(0.0f32..1.0) < cfg.resize_skip {
                    continue;
                }
                let factor = rng.gen_range(cfg.resize_factor[0]..=cfg.resize_factor[1]);
                let filter = match rng.gen_range(0..3u8) {
                    0 => Filter::Nearest,
                    1 => Filter::Bilinear,
                    _ => Filter::CatmullRom,
                };
                let nh = ((img.height as f32 * factor).round() as usize).max(lr_h);
                let nw = ((img.width as f32 * factor).round() as usize).max(lr_w);
                img = resize_rgb(&img, nh, nw, filter);
                img.clamp_unit();
                log.push(StageLog::Resize { factor, filter });
            }
            StageKind::Noise => {
                if rng.gen_range(0.0f32..1.0) < cfg.noise_skip {
                    continue;
                }
                let sigma = rng.gen_range(cfg.noise_sigma[0]..=cfg.noise_sigma[1]) / 255.0;
                let gray = rng.gen_range(0.0f32..1.0) < cfg.noise_gray_prob;
                add_noise(&mut img, sigma, gray, rng);
                log.push(StageLog::Noise { sigma, gray });
            }
            StageKind::Jpeg => {
                if rng.gen_range(0.0f32..1.0) < cfg.jpeg_skip {
                    continue;
                }
                let quality = rng.gen_range(cfg.jpeg_quality[0]..=cfg.jpeg_quality[1]);
                img = jpeg_round_trip(&img, quality)?;
                log.push(StageLog::Jpeg { quality });
            }
        }
    }

    let mut lr = resize_rgb(&img, lr_h, lr_w, Filter::CatmullRom);
    lr.clamp_unit();
    Ok((lr, log))
}

/// Fill the LR side of every sample, one independent chain per sample index.
pub fn degrade_batch(samples: &mut [TextSample], cfg: &DegradeConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    samples
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(i, sample)| -> Result<()> {
            let sample_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
            let mut stages = Vec::new();
            if cfg.color_jitter {
                stages.push(color_jitter(&mut sample.hr, &mut rng));
                crate::synth::quantize_to_8bit(&mut sample.hr);
            }
            let (mut lr, chain) = degrade(&sample.hr, cfg, &mut rng)?;
            crate::synth::quantize_to_8bit(&mut lr);
            stages.extend(chain);
            sample.lr = Some(lr);
            sample.scale = Some(cfg.scale);
            sample.chain = Some(ChainLog { scale: cfg.scale, seed: sample_seed, stages });
            Ok(())
        })
}

/// Reference clean LR: the anti-aliased cubic downsample of the HR image.
pub fn bicubic_down(hr: &RgbImage, scale: usize) -> RgbImage {
    resize_rgb(hr, hr.height / scale, hr.width / scale, Filter::CatmullRom)
}

/// Bicubic upsample, the no-model SR baseline.
pub fn bicubic_up(lr: &RgbImage, scale: usize) -> RgbImage {
    let mut up = resize_rgb(lr, lr.height * scale, lr.width * scale, Filter::CatmullRom);
    up.clamp_unit();
    up
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> RgbImage {
        let mut img = RgbImage::new(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = ((x * 13 + y * 7 + c * 31) % 97) as f32 / 96.0;
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    #[test]
    fn shapes_follow_scale() {
        let hr = test_image(128, 512);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (lr, _) = degrade(&hr, &DegradeConfig::clean(4), &mut rng).unwrap();
        assert_eq!((lr.height, lr.width), (32, 128));
        let (lr2, _) = degrade(&hr, &DegradeConfig::clean(2), &mut rng).unwrap();
        assert_eq!((lr2.height, lr2.width), (64, 256));
    }

    #[test]
    fn indivisible_shape_is_an_error() {
        let hr = test_image(126, 512);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(degrade(&hr, &DegradeConfig::clean(4), &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_output() {
        let hr = test_image(64, 128);
        let cfg = DegradeConfig::default();
        let (a, la) = degrade(&hr, &cfg, &mut ChaCha12Rng::seed_from_u64(42)).unwrap();
        let (b, lb) = degrade(&hr, &cfg, &mut ChaCha12Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
    }

    #[test]
    fn values_stay_in_unit_range() {
        let hr = test_image(64, 128);
        let cfg = DegradeConfig { pipeline_mix: true, ..Default::default() };
        for seed in 0..20 {
            let (lr, _) = degrade(&hr, &cfg, &mut ChaCha12Rng::seed_from_u64(seed)).unwrap();
            assert!(lr.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn high_quality_jpeg_keeps_psnr_high() {
        let hr = test_image(128, 256);
        let cfg = DegradeConfig {
            blur_skip: 1.0,
            resize_skip: 1.0,
            noise_skip: 1.0,
            jpeg_skip: 0.0,
            jpeg_quality: [100, 100],
            shuffle: false,
            ..DegradeConfig::clean(4)
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (lr, log) = degrade(&hr, &cfg, &mut rng).unwrap();
        assert_eq!(log.len(), 1);
        let clean = bicubic_down(&hr, 4);
        let psnr = crate::metrics::psnr(&clean, &lr).unwrap();
        assert!(psnr > 40.0, "psnr={psnr}");
    }
}
