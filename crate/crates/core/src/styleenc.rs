//! Per-character style prediction from the LR line by GAN inversion: a
//! feature-pyramid encoder over the line, a fixed-size crop around each
//! character center, and two linear layers mapping the crop to the style
//! latent `w`. Trained by inverting the frozen generator against the
//! ground-truth structure glyphs.

use crate::charset::CharsetTable;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::blocks::{leaky_relu, Conv2d, Linear};
use crate::nn::vars::{load_safetensors, save_safetensors};
use crate::nn::{Adam, ParamStore, PlateauDecay};
use crate::priorgen::{structures_to_tensor, PriorModel, PRIOR_STACK_PREFIXES};
use crate::synth::TextSample;
use crate::LATENT_DIM;
use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Working height of the encoder input; LR lines are resized here first.
const ENC_H: usize = 32;
/// Feature downsample factor of the pyramid.
const FEAT_STRIDE: usize = 4;
/// Crop window: one character height at the feature scale.
pub const CROP_WINDOW: usize = ENC_H / FEAT_STRIDE;
const FEAT_CH: usize = 64;

/// Sum or per-element mean; the repo convention is mean, the sum forms are
/// kept for closed-form checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub struct StyleEncoder {
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    pub charset_hash: String,
}

impl StyleEncoder {
    pub fn new(charset: &CharsetTable, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed.wrapping_add(2));
        let root = store.root().sub("enc");
        let chans = [3usize, 32, FEAT_CH];
        let mut convs = Vec::new();
        for i in 0..2 {
            convs.push(Conv2d::new(&root.sub(&format!("c{i}")), chans[i], chans[i + 1], 3, 2, 1)?);
        }
        convs.push(Conv2d::new(&root.sub("c2"), FEAT_CH, FEAT_CH, 3, 1, 1)?);
        let fc1 = Linear::new(
            &root.sub("fc1"),
            FEAT_CH * CROP_WINDOW * CROP_WINDOW,
            LATENT_DIM,
            true,
        )?;
        let fc2 = Linear::new(&root.sub("fc2"), LATENT_DIM, LATENT_DIM, true)?;
        Ok(Self { store, convs, fc1, fc2, charset_hash: charset.hash().to_string() })
    }

    /// Line features `(C, H/4, W/4)` over the 32-high working image.
    pub fn line_features(&self, lr: &RgbImage) -> Result<Tensor> {
        let scale = ENC_H as f64 / lr.height as f64;
        let w = ((lr.width as f64 * scale).round() as usize).max(FEAT_STRIDE);
        let resized = crate::resample::resize_rgb(lr, ENC_H, w, crate::resample::Filter::CatmullRom);
        let x = Tensor::from_vec(
            resized.data().to_vec(),
            (1, 3, ENC_H, w),
            self.store.device(),
        )?;
        let mut h = x;
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        Ok(h.squeeze(0)?)
    }

    /// Map one cropped feature window to `w` with the two linear layers.
    fn crop_to_w(&self, crop: &Tensor) -> Result<Tensor> {
        let flat = crop.reshape((1, FEAT_CH * CROP_WINDOW * CROP_WINDOW))?;
        let h = leaky_relu(&self.fc1.forward(&flat)?, 0.2)?;
        self.fc2.forward(&h)
    }

    /// Style vectors for each character, order-aligned with `centers_hr`.
    pub fn encode_styles(
        &self,
        lr: &RgbImage,
        centers_hr: &[f32],
        valid_width_hr: usize,
    ) -> Result<Tensor> {
        if centers_hr.is_empty() {
            return Err(Error::invalid("encode_styles needs at least one center"));
        }
        let feats = self.line_features(lr)?;
        // HR -> working image -> feature scale. The working image is the
        // valid-width LR resized to height 32, so one HR pixel maps to
        // 32/128 * 1/FEAT_STRIDE feature columns.
        let to_feat = (ENC_H as f64 / crate::HR_HEIGHT as f64) / FEAT_STRIDE as f64;
        let mut ws = Vec::with_capacity(centers_hr.len());
        for &c in centers_hr {
            if c < 0.0 || c as usize >= valid_width_hr {
                return Err(Error::invalid(format!(
                    "center {c} outside valid width {valid_width_hr}"
                )));
            }
            let crop = crop_char_feature(&feats, c as f64 * to_feat, CROP_WINDOW)?;
            ws.push(self.crop_to_w(&crop)?);
        }
        Ok(Tensor::cat(&ws, 0)?)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>, opt: Option<&Adam>) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .store
            .entries()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "style".to_string());
        meta.insert("charset_hash".to_string(), self.charset_hash.clone());
        for (k, v) in extra {
            meta.insert(k.clone(), v.clone());
        }
        if let Some(opt) = opt {
            entries.extend(opt.state_entries("main"));
            meta.insert("opt.main.step".to_string(), opt.step_count().to_string());
        }
        save_safetensors(&entries, &meta, path)
    }

    pub fn load(path: &Path, charset: &CharsetTable) -> Result<Self> {
        let (tensors, meta) = load_safetensors(path)?;
        let hash = meta
            .get("charset_hash")
            .ok_or_else(|| Error::Checkpoint("style checkpoint missing charset hash".into()))?;
        charset.check_hash(hash, "style checkpoint")?;
        let model = Self::new(charset, 0)?;
        let n = model.store.entries().len();
        if model.store.load_from(&tensors)? != n {
            return Err(Error::Checkpoint("style checkpoint incomplete".into()));
        }
        Ok(model)
    }
}

/// Fixed-size window around a (scaled) center column, zero-filled where it
/// overhangs the line. `features`: `(C, H, W)`.
pub fn crop_char_feature(features: &Tensor, center_x: f64, window: usize) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    let x0 = center_x.round() as isize - (window as isize) / 2;
    let x1 = x0 + window as isize;
    let in_lo = x0.max(0) as usize;
    let in_hi = (x1.min(w as isize)).max(0) as usize;
    if in_lo >= in_hi {
        return Ok(Tensor::zeros((c, h, window), features.dtype(), features.device())?);
    }
    let slice = features.narrow(2, in_lo, in_hi - in_lo)?;
    let pad_left = (in_lo as isize - x0) as usize;
    let pad_right = window - pad_left - (in_hi - in_lo);
    let mut out = slice;
    if pad_left > 0 {
        out = Tensor::cat(
            &[Tensor::zeros((c, h, pad_left), out.dtype(), out.device())?, out],
            2,
        )?;
    }
    if pad_right > 0 {
        let zeros = Tensor::zeros((c, h, pad_right), out.dtype(), out.device())?;
        out = Tensor::cat(&[out, zeros], 2)?;
    }
    Ok(out)
}

/// Inversion loss: distance between `G(c_i, w_i)` and the ground-truth
/// structure glyphs, generator and codebook frozen by the caller.
pub fn loss_inv(
    prior: &PriorModel,
    ws: &Tensor,
    labels: &[u32],
    gt: &Tensor,
    reduction: Reduction,
) -> Result<Tensor> {
    let (k, _) = ws.dims2()?;
    if k != labels.len() || gt.dims()[0] != k {
        return Err(Error::ShapeMismatch(format!(
            "loss_inv: {k} styles vs {} labels vs {:?} structures",
            labels.len(),
            gt.dims()
        )));
    }
    let generated = prior.generate_for_labels(labels, ws)?.image;
    let diff = (generated - gt)?.abs()?;
    match reduction {
        Reduction::Sum => Ok(diff.sum_all()?),
        Reduction::Mean => Ok(diff.mean_all()?),
    }
}

/// Adjacent-style regularizer: distance between consecutive `w`s; zero for
/// a single character.
pub fn loss_reg(ws: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let (k, _) = ws.dims2()?;
    if k < 2 {
        return Ok(Tensor::zeros((), ws.dtype(), ws.device())?);
    }
    let a = ws.narrow(0, 1, k - 1)?;
    let b = ws.narrow(0, 0, k - 1)?;
    let diff = (a - b)?.abs()?;
    match reduction {
        Reduction::Sum => Ok(diff.sum_all()?),
        Reduction::Mean => Ok(diff.mean_all()?),
    }
}

/// Overall style objective: `loss_inv + lambda_reg * loss_reg`.
pub fn loss_w(
    prior: &PriorModel,
    ws: &Tensor,
    labels: &[u32],
    gt: &Tensor,
    lambda_reg: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    if lambda_reg < 0.0 {
        return Err(Error::invalid("lambda_reg must be non-negative"));
    }
    let inv = loss_inv(prior, ws, labels, gt, reduction)?;
    if lambda_reg == 0.0 {
        return Ok(inv);
    }
    let reg = loss_reg(ws, reduction)?;
    Ok((inv + (reg * lambda_reg)?)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleTrainConfig {
    pub lines_per_step: usize,
    pub lr: f64,
    pub lambda_reg: f64,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        Self {
            lines_per_step: 4,
            lr: 2e-4,
            lambda_reg: 0.02,
            steps: 400,
            steps_per_epoch: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StyleTrainLog {
    pub loss: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    /// Checksums of the frozen stacks before and after training.
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

fn frozen_checksum(prior: &PriorModel) -> String {
    let mut h = sha2::Sha256::new();
    use sha2::Digest;
    for prefix in PRIOR_STACK_PREFIXES {
        h.update(prior.store.checksum_prefix(prefix).as_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Train the style encoder against a frozen prior stack.
pub fn train_style(
    samples: &[TextSample],
    charset: &CharsetTable,
    prior_path: &Path,
    cfg: &StyleTrainConfig,
    out_dir: &Path,
) -> Result<(StyleEncoder, StyleTrainLog)> {
    std::fs::create_dir_all(out_dir)?;
    let prior = PriorModel::load(prior_path, charset)?;
    let prior_file_hash = file_hash(prior_path)?;
    let encoder = StyleEncoder::new(charset, cfg.seed)?;
    let device = encoder.store.device().clone();

    let usable: Vec<&TextSample> = samples.iter().filter(|s| s.lr.is_some()).collect();
    if usable.is_empty() {
        return Err(Error::invalid("style training needs degraded samples"));
    }

    let enc_params = encoder.store.entries();
    let mut adam = Adam::standard(cfg.lr);
    let mut plateau = PlateauDecay::new(100);
    let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::derive_seed(cfg.seed, 0x57E1));
    let mut log = StyleTrainLog {
        frozen_checksum_before: frozen_checksum(&prior),
        ..Default::default()
    };

    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut cursor = 0usize;
    for step in 0..cfg.steps {
        let mut losses = Vec::with_capacity(cfg.lines_per_step);
        for _ in 0..cfg.lines_per_step {
            if cursor == 0 {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
            }
            let sample = usable[order[cursor]];
            cursor = (cursor + 1) % order.len();
            let lr_img = sample.lr.as_ref().expect("filtered");
            let ws = encoder.encode_styles(lr_img, &sample.centers, sample.valid_width)?;
            let gts: Vec<&crate::image::GrayImage> = sample.structures.iter().collect();
            let gt = structures_to_tensor(&gts, &device)?;
            losses.push(loss_w(&prior, &ws, &sample.labels, &gt, cfg.lambda_reg, Reduction::Mean)?);
        }
        let mut total = losses[0].clone();
        for l in &losses[1..] {
            total = (total + l)?;
        }
        let loss = (total / cfg.lines_per_step as f64)?;
        let val = loss.to_scalar::<f32>()? as f64;
        if !val.is_finite() {
            return Err(Error::Diverged { step, what: "style loss".into() });
        }
        let grads = loss.backward()?;
        adam.step(&enc_params, &grads)?;
        log.loss.push(val);
        let mut lr = adam.lr;
        if plateau.observe(val, &mut lr).is_some() {
            adam.lr = lr;
        }

        if (step + 1) % cfg.steps_per_epoch == 0 || step + 1 == cfg.steps {
            let window = cfg.steps_per_epoch.min(log.loss.len());
            let mean =
                log.loss[log.loss.len() - window..].iter().sum::<f64>() / window as f64;
            log.epoch_loss.push(mean);
            let epoch = (step + 1) / cfg.steps_per_epoch;
            let mut meta = BTreeMap::new();
            meta.insert("config".to_string(), crate::config::to_canonical_toml(cfg)?);
            meta.insert("prior_ckpt_hash".to_string(), prior_file_hash.clone());
            encoder.save(
                &out_dir.join(format!("style_epoch{epoch:03}.safetensors")),
                &meta,
                Some(&adam),
            )?;
        }
    }

    log.frozen_checksum_after = frozen_checksum(&prior);
    if log.frozen_checksum_before != log.frozen_checksum_after {
        return Err(Error::Checkpoint(
            "frozen generator/codebook parameters changed during style training".into(),
        ));
    }
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), crate::config::to_canonical_toml(cfg)?);
    meta.insert("prior_ckpt_hash".to_string(), prior_file_hash);
    encoder.save(&out_dir.join("style.safetensors"), &meta, Some(&adam))?;
    std::fs::write(
        out_dir.join("style_train_log.toml"),
        toml::to_string(&log).map_err(|e| Error::TomlSer(e.to_string()))?,
    )?;
    Ok((encoder, log))
}

pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::Digest;
    let bytes = std::fs::read(path)?;
    let mut h = sha2::Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    fn feat(c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f32> = (0..c * h * w).map(|i| i as f32).collect();
        Tensor::from_vec(data, (c, h, w), &device()).unwrap()
    }

    #[test]
    fn crop_window_arithmetic() {
        let f = feat(1, 2, 256);
        let crop = crop_char_feature(&f, 128.0, 32).unwrap();
        assert_eq!(crop.dims(), &[1, 2, 32]);
        let vals = crop.to_vec3::<f32>().unwrap();
        // Columns [112, 144).
        for (j, v) in vals[0][0].iter().enumerate() {
            assert_eq!(*v, (112 + j) as f32);
        }
    }

    #[test]
    fn crop_zero_fills_left_edge() {
        let f = feat(1, 1, 64);
        let crop = crop_char_feature(&f, 0.0, 8).unwrap();
        let vals = crop.to_vec3::<f32>().unwrap();
        for j in 0..4 {
            assert_eq!(vals[0][0][j], 0.0, "left half zero-filled");
        }
        for j in 4..8 {
            assert_eq!(vals[0][0][j], (j - 4) as f32);
        }
        let c2 = crop_char_feature(&f, 0.0, 8).unwrap();
        assert_eq!(
            crop.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            c2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn loss_reg_closed_forms() {
        let dev = device();
        let zeros = Tensor::zeros((1, LATENT_DIM), candle_core::DType::F32, &dev).unwrap();
        let z = loss_reg(&zeros, Reduction::Sum).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(z, 0.0, "K=1 is an empty sum");

        let mut data = vec![0.0f32; 3 * LATENT_DIM];
        for v in &mut data[LATENT_DIM..2 * LATENT_DIM] {
            *v = 1.0;
        }
        let ws = Tensor::from_vec(data, (3, LATENT_DIM), &dev).unwrap();
        let sum = loss_reg(&ws, Reduction::Sum).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(sum, 2.0 * LATENT_DIM as f32);
        let mean = loss_reg(&ws, Reduction::Mean).unwrap().to_scalar::<f32>().unwrap();
        assert!((mean - 1.0).abs() < 1e-6);

        let same = Tensor::ones((4, LATENT_DIM), candle_core::DType::F32, &dev).unwrap();
        assert_eq!(loss_reg(&same, Reduction::Sum).unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn encoder_arity_and_locality() {
        let charset = CharsetTable::digits();
        let enc = StyleEncoder::new(&charset, 11).unwrap();
        let mut lr = RgbImage::new(32, 128);
        for (i, v) in lr.data_mut().iter_mut().enumerate() {
            *v = ((i * 13) % 71) as f32 / 70.0;
        }
        let centers = [64.0f32, 256.0, 410.0];
        let ws = enc.encode_styles(&lr, &centers, 512).unwrap();
        assert_eq!(ws.dims(), &[3, LATENT_DIM]);
        // Per-crop locality: swapping two centers swaps the two outputs.
        let swapped = [256.0f32, 64.0, 410.0];
        let ws2 = enc.encode_styles(&lr, &swapped, 512).unwrap();
        let a = ws.to_vec2::<f32>().unwrap();
        let b = ws2.to_vec2::<f32>().unwrap();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);
        assert_eq!(a[2], b[2]);
        // Out-of-width center is an error; empty centers too.
        assert!(enc.encode_styles(&lr, &[600.0], 512).is_err());
        assert!(enc.encode_styles(&lr, &[], 512).is_err());
    }
}
