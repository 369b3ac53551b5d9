//! The SR network: a UNet LR-feature extractor, the multi-scale structure
//! prior transform (compose -> AdaIN -> spatial affine modulation), a
//! Conv-ReLU-ResBlock head on top of a bicubic residual, and a
//! structure-conditioned hinge discriminator.
//!
//! Variant toggles reproduce the ablation family from config alone:
//! `UNetOnly` (no prior path), `CodesOnly` (codes splatted directly,
//! generator removed), `LrFeat` (LR crop features replace the codebook),
//! scale subsets {32}, {64}, and a plain (unconditioned) discriminator.

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::blocks::{adain, leaky_relu, upsample2x, Conv2d, Linear, ResBlock};
use crate::nn::vars::{load_safetensors, save_safetensors};
use crate::nn::{Adam, ParamStore, PlateauDecay, Scope};
use crate::perceptual::FeatureExtractor;
use crate::priorgen::{hinge_d_loss, hinge_g_loss, tap_channels, PriorModel};
use crate::charset::CharsetTable;
use crate::styleenc::StyleEncoder;
use crate::synth::TextSample;
use crate::{HR_HEIGHT, STRUCT_SIZE};
use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Full pipeline: codebook + generator taps.
    Full,
    /// No prior injection at all (the plain UNet variant).
    UnetOnly,
    /// Codes splatted into character windows, generator removed.
    CodesOnly,
    /// LR crop features replace the codebook as the generator input.
    LrFeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    /// Image crop concatenated with its structure image.
    StructureCond,
    /// Image crop only.
    Plain,
    /// Adversarial loss disabled.
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SrConfig {
    pub scale: usize,
    pub prior_mode: PriorMode,
    pub disc: DiscMode,
    /// Which transform scales are active (subset of {32, 64}).
    pub sptm_scales: Vec<usize>,
    pub lambda_percep: f64,
    pub lambda_adv: f64,
    /// Characters sampled per line for the adversarial and structure losses.
    pub adv_chars_per_line: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            prior_mode: PriorMode::Full,
            disc: DiscMode::StructureCond,
            sptm_scales: vec![32, 64],
            lambda_percep: 0.05,
            lambda_adv: 0.01,
            adv_chars_per_line: 4,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::config(format!("scale {} not in {{2,4}}", self.scale)));
        }
        for s in &self.sptm_scales {
            if *s != 32 && *s != 64 {
                return Err(Error::config(format!("sptm scale {s} not in {{32,64}}")));
            }
        }
        Ok(())
    }

    /// Table of ablation variants, constructible from config alone.
    pub fn variant(name: &str, scale: usize) -> Result<Self> {
        let base = Self { scale, ..Default::default() };
        Ok(match name {
            "full" => base,
            "unet" => Self { prior_mode: PriorMode::UnetOnly, disc: DiscMode::Off, ..base },
            "wo_s" => Self { prior_mode: PriorMode::CodesOnly, ..base },
            "wo_c" => Self { prior_mode: PriorMode::LrFeat, ..base },
            "s32" => Self { sptm_scales: vec![32], ..base },
            "s64" => Self { sptm_scales: vec![64], ..base },
            "d_minus" => Self { disc: DiscMode::Plain, ..base },
            other => return Err(Error::config(format!("unknown variant {other}"))),
        })
    }
}

/// Per-scale canvas holding accumulated prior features, aligned with the
/// LR feature grid; zero outside every character window.
pub struct PriorCanvas {
    /// `(1, C_s, s, w_s)`
    pub tensor: Tensor,
}

/// Place `K` per-character tap features onto a canvas of height `s`.
/// Each tap (s x s) is centered at its scaled center; overlaps accumulate
/// additively and the region outside every window stays exactly zero.
/// Contributions are summed in ascending-center order, so any permutation
/// of the characters produces bitwise-identical output. Built from tensor
/// ops: gradients flow back into the taps when the caller wants them to.
pub fn compose_prior_canvas(
    taps: &Tensor,
    centers_hr: &[f32],
    s: usize,
    canvas_width: usize,
) -> Result<PriorCanvas> {
    let (k, c, th, tw) = taps.dims4()?;
    if k != centers_hr.len() {
        return Err(Error::ShapeMismatch(format!(
            "{k} taps vs {} centers",
            centers_hr.len()
        )));
    }
    if th != s || tw != s {
        return Err(Error::ShapeMismatch(format!("tap {th}x{tw} does not match scale {s}")));
    }
    let scale_factor = s as f64 / HR_HEIGHT as f64;
    let hr_width = canvas_width as f64 / scale_factor;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers_hr[a].partial_cmp(&centers_hr[b]).expect("finite centers"));

    let device = taps.device();
    let mut acc = Tensor::zeros((1, c, s, canvas_width), taps.dtype(), device)?;
    for &i in &order {
        let center = centers_hr[i] as f64;
        if !(0.0..hr_width).contains(&center) {
            return Err(Error::invalid(format!(
                "center {center} outside canvas of HR width {hr_width}"
            )));
        }
        let x0 = (center * scale_factor).round() as isize - (s as isize) / 2;
        let lo = x0.max(0);
        let hi = (x0 + s as isize).min(canvas_width as isize);
        if hi <= lo {
            continue;
        }
        let tap = taps.narrow(0, i, 1)?.narrow(3, (lo - x0) as usize, (hi - lo) as usize)?;
        let mut parts: Vec<Tensor> = Vec::with_capacity(3);
        if lo > 0 {
            parts.push(Tensor::zeros((1, c, s, lo as usize), taps.dtype(), device)?);
        }
        parts.push(tap);
        if (hi as usize) < canvas_width {
            parts.push(Tensor::zeros((1, c, s, canvas_width - hi as usize), taps.dtype(), device)?);
        }
        let placed = Tensor::cat(&parts, 3)?;
        acc = (acc + placed)?;
    }
    Ok(PriorCanvas { tensor: acc })
}

/// Structure prior transform at one scale: AdaIN the canvas to the LR
/// feature statistics, then predict per-position scale/shift from the
/// concatenation and modulate the LR features.
pub struct Sptm {
    conv1: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Sptm {
    pub fn new(scope: &Scope, lr_ch: usize, prior_ch: usize) -> Result<Self> {
        let hidden = lr_ch.max(prior_ch);
        Ok(Self {
            conv1: Conv2d::new(&scope.sub("conv1"), lr_ch + prior_ch, hidden, 3, 1, 1)?,
            // Zero-init: the module starts as the identity on LR features.
            gamma: Conv2d::zeroed(&scope.sub("gamma"), hidden, lr_ch, 3, 1, 1)?,
            beta: Conv2d::zeroed(&scope.sub("beta"), hidden, lr_ch, 3, 1, 1)?,
        })
    }

    /// `identity_hook` forces `gamma=1, beta=0` (returns `lr_feat` bitwise).
    pub fn forward(
        &self,
        lr_feat: &Tensor,
        canvas: &Tensor,
        identity_hook: bool,
    ) -> Result<Tensor> {
        if identity_hook {
            return Ok(lr_feat.clone());
        }
        if lr_feat.dims()[2] != canvas.dims()[2] || lr_feat.dims()[3] != canvas.dims()[3] {
            return Err(Error::ShapeMismatch(format!(
                "sptm: lr {:?} vs canvas {:?}",
                lr_feat.dims(),
                canvas.dims()
            )));
        }
        let canvas = self.normalize_canvas(lr_feat, canvas)?;
        let h = leaky_relu(&self.conv1.forward(&Tensor::cat(&[lr_feat, &canvas], 1)?)?, 0.2)?;
        let gamma = self.gamma.forward(&h)?;
        let beta = self.beta.forward(&h)?;
        // out = (1 + gamma) * lr + beta
        Ok(((lr_feat * &(gamma + 1.0)?)? + beta)?)
    }

    /// AdaIN step alone (exposed for the statistics contract tests).
    pub fn normalize_canvas(&self, lr_feat: &Tensor, canvas: &Tensor) -> Result<Tensor> {
        adain(canvas, lr_feat, 1e-5)
    }
}

struct DownBlock {
    conv: Conv2d,
}

struct UpBlock {
    conv: Conv2d,
}

/// UNet-style LR feature extractor with a decoder ladder rising past the
/// input resolution to 128-high features.
pub struct SrNet {
    pub store: ParamStore,
    pub cfg: SrConfig,
    stem: Conv2d,
    down1: DownBlock,
    down2: DownBlock,
    mid: ResBlock,
    ups: Vec<(usize, UpBlock)>,
    skip1: Conv2d,
    skip2: Conv2d,
    sptm32: Sptm,
    sptm64: Sptm,
    code_proj32: Linear,
    code_proj64: Linear,
    head_in_conv: Conv2d,
    head_res: Vec<ResBlock>,
    head_out: Conv2d,
    pub disc: CondDiscriminator,
    pub charset_hash: String,
}

const STEM_CH: usize = 32;
const ENC1_CH: usize = 48;
const ENC2_CH: usize = 64;
const HEAD_CH: usize = 24;

fn ladder_channels(h: usize) -> usize {
    match h {
        8 => 64,
        16 => 56,
        32 => 48,
        64 => 24,
        128 => 16,
        _ => 32,
    }
}

impl SrNet {
    pub fn new(charset: &CharsetTable, cfg: &SrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed.wrapping_add(3));
        let root = store.root().sub("sr");
        let lr_h = HR_HEIGHT / cfg.scale;

        let stem = Conv2d::new(&root.sub("stem"), 3, STEM_CH, 3, 1, 1)?;
        let down1 = DownBlock { conv: Conv2d::new(&root.sub("down1"), STEM_CH, ENC1_CH, 3, 2, 1)? };
        let down2 = DownBlock { conv: Conv2d::new(&root.sub("down2"), ENC1_CH, ENC2_CH, 3, 2, 1)? };
        let mid = ResBlock::new(&root.sub("mid"), ENC2_CH)?;

        // Decoder ladder: heights from lr_h/4 doubling to 128.
        let mut ups = Vec::new();
        let mut h = lr_h / 4;
        let mut in_ch = ENC2_CH;
        while h < HR_HEIGHT {
            let out_h = h * 2;
            let out_ch = ladder_channels(out_h);
            ups.push((
                out_h,
                UpBlock {
                    conv: Conv2d::new(&root.sub(&format!("up{out_h}")), in_ch, out_ch, 3, 1, 1)?,
                },
            ));
            in_ch = out_ch;
            h = out_h;
        }
        let skip1 = Conv2d::new(&root.sub("skip1"), ENC1_CH, ladder_channels(lr_h / 2), 1, 1, 0)?;
        let skip2 = Conv2d::new(&root.sub("skip2"), STEM_CH, ladder_channels(lr_h), 1, 1, 0)?;

        let sptm32 = Sptm::new(&root.sub("sptm32"), ladder_channels(32), tap_channels(32))?;
        let sptm64 = Sptm::new(&root.sub("sptm64"), ladder_channels(64), tap_channels(64))?;
        let code_proj32 =
            Linear::new(&root.sub("code_proj32"), crate::LATENT_DIM, tap_channels(32), true)?;
        let code_proj64 =
            Linear::new(&root.sub("code_proj64"), crate::LATENT_DIM, tap_channels(64), true)?;

        let mut head_res = Vec::new();
        let head_in_conv =
            Conv2d::new(&root.sub("head_in"), ladder_channels(HR_HEIGHT), HEAD_CH, 3, 1, 1)?;
        for i in 0..2 {
            head_res.push(ResBlock::new(&root.sub(&format!("head_res{i}")), HEAD_CH)?);
        }
        let head_out = Conv2d::zeroed(&root.sub("head_out"), HEAD_CH, 3, 3, 1, 1)?;

        let disc = CondDiscriminator::new(&store.root().sub("disc"), cfg.disc)?;

        Ok(Self {
            store,
            cfg: cfg.clone(),
            stem,
            down1,
            down2,
            mid,
            ups,
            skip1,
            skip2,
            sptm32,
            sptm64,
            code_proj32,
            code_proj64,
            head_in_conv,
            head_res,
            head_out,
            disc,
            charset_hash: charset.hash().to_string(),
        })
    }

    /// SR forward. `priors` is `None` for the prior-free path (either the
    /// UNet variant or zero detected characters).
    pub fn forward(
        &self,
        lr: &Tensor,
        priors: Option<&ComposedPriors>,
        bicubic_base: &Tensor,
    ) -> Result<Tensor> {
        let s0 = leaky_relu(&self.stem.forward(lr)?, 0.2)?; // (B, 32, h, w)
        let d1 = leaky_relu(&self.down1.conv.forward(&s0)?, 0.2)?; // h/2
        let d2 = leaky_relu(&self.down2.conv.forward(&d1)?, 0.2)?; // h/4
        let mut x = self.mid.forward(&d2)?;
        let lr_h = lr.dims()[2];
        for (out_h, up) in &self.ups {
            x = upsample2x(&x)?;
            x = leaky_relu(&up.conv.forward(&x)?, 0.2)?;
            if *out_h == lr_h / 2 {
                x = (x + self.skip1.forward(&d1)?)?;
            } else if *out_h == lr_h {
                x = (x + self.skip2.forward(&s0)?)?;
            }
            if let Some(p) = priors {
                if *out_h == 32 && self.cfg.sptm_scales.contains(&32) {
                    if let Some(c32) = &p.canvas32 {
                        x = self.sptm32.forward(&x, &c32.tensor, false)?;
                    }
                }
                if *out_h == 64 && self.cfg.sptm_scales.contains(&64) {
                    if let Some(c64) = &p.canvas64 {
                        x = self.sptm64.forward(&x, &c64.tensor, false)?;
                    }
                }
            }
        }
        let mut h = leaky_relu(&self.head_in_conv.forward(&x)?, 0.2)?;
        for rb in &self.head_res {
            h = rb.forward(&h)?;
        }
        let residual = self.head_out.forward(&h)?;
        Ok((bicubic_base + residual)?)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>, opts: &[(&str, &Adam)]) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .store
            .entries()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "sr".to_string());
        meta.insert("charset_hash".to_string(), self.charset_hash.clone());
        meta.insert("config".to_string(), crate::config::to_canonical_toml(&self.cfg)?);
        for (k, v) in extra {
            meta.insert(k.clone(), v.clone());
        }
        for (prefix, opt) in opts {
            entries.extend(opt.state_entries(prefix));
            meta.insert(format!("opt.{prefix}.step"), opt.step_count().to_string());
        }
        save_safetensors(&entries, &meta, path)
    }

    pub fn load(path: &Path, charset: &CharsetTable) -> Result<Self> {
        let (tensors, meta) = load_safetensors(path)?;
        let hash = meta
            .get("charset_hash")
            .ok_or_else(|| Error::Checkpoint("sr checkpoint missing charset hash".into()))?;
        charset.check_hash(hash, "sr checkpoint")?;
        let cfg: SrConfig = toml::from_str(
            meta.get("config")
                .ok_or_else(|| Error::Checkpoint("sr checkpoint missing config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("sr config: {e}")))?;
        let model = Self::new(charset, &cfg, 0)?;
        let n = model.store.entries().len();
        if model.store.load_from(&tensors)? != n {
            return Err(Error::Checkpoint("sr checkpoint incomplete".into()));
        }
        Ok(model)
    }
}

/// Composed prior canvases for one line (batch size 1 per line).
pub struct ComposedPriors {
    pub canvas32: Option<PriorCanvas>,
    pub canvas64: Option<PriorCanvas>,
    /// `(K, 1, 128, 128)` generated structure images for the characters.
    pub structures: Option<Tensor>,
}

/// Structure-conditioned hinge discriminator on 128x128 character crops.
pub struct CondDiscriminator {
    convs: Vec<Conv2d>,
    out: Linear,
    pub mode: DiscMode,
}

impl CondDiscriminator {
    fn new(scope: &Scope, mode: DiscMode) -> Result<Self> {
        let in_ch = match mode {
            DiscMode::StructureCond => 4,
            _ => 3,
        };
        let chans = [in_ch, 24, 48, 64, 64, 64];
        let mut convs = Vec::new();
        for i in 0..5 {
            convs.push(Conv2d::new(&scope.sub(&format!("c{i}")), chans[i], chans[i + 1], 3, 2, 1)?);
        }
        let out = Linear::new(&scope.sub("out"), 64 * 16, 1, true)?;
        Ok(Self { convs, out, mode })
    }

    /// `crop`: `(B, 3, 128, 128)`, `structure`: `(B, 1, 128, 128)`.
    pub fn forward(&self, crop: &Tensor, structure: Option<&Tensor>) -> Result<Tensor> {
        let x = match (self.mode, structure) {
            (DiscMode::StructureCond, Some(s)) => Tensor::cat(&[crop, s], 1)?,
            (DiscMode::StructureCond, None) => {
                return Err(Error::invalid("conditioned discriminator needs structures"))
            }
            _ => crop.clone(),
        };
        let mut h = x;
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        let (b, _, _, _) = h.dims4()?;
        self.out.forward(&h.reshape((b, 64 * 16))?)
    }
}

/// Reconstruction loss: mean L1 plus the staged perceptual term.
pub fn loss_rec(
    sr: &Tensor,
    gt: &Tensor,
    lambda_percep: f64,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<Tensor> {
    if sr.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "loss_rec: {:?} vs {:?}",
            sr.dims(),
            gt.dims()
        )));
    }
    let mut loss = (sr - gt)?.abs()?.mean_all()?;
    if lambda_percep > 0.0 {
        let ex = extractor
            .ok_or_else(|| Error::invalid("lambda_percep > 0 requires a feature extractor"))?;
        let fs = ex.stages(sr)?;
        let fg = ex.stages(gt)?;
        for (a, b) in fs.iter().zip(fg.iter()) {
            loss = (loss + ((a - b)?.abs()?.mean_all()? * lambda_percep)?)?;
        }
    }
    Ok(loss)
}

/// Structure consistency: L1 between generated and GT structure images.
pub fn loss_str(generated: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if generated.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "loss_str: {:?} vs {:?}",
            generated.dims(),
            gt.dims()
        )));
    }
    Ok((generated - gt)?.abs()?.mean_all()?)
}

/// Adversarial pair losses (hinge), re-exported shape for the SR stage.
pub fn loss_adv(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((hinge_d_loss(d_real, d_fake)?, hinge_g_loss(d_fake)?))
}

pub fn image_to_batch(img: &RgbImage, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(img.data().to_vec(), (1, 3, img.height, img.width), device)?)
}

pub fn batch_to_image(t: &Tensor) -> Result<RgbImage> {
    let (_, _, h, w) = t.dims4()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    let mut img = RgbImage::from_planes(h, w, data)?;
    img.clamp_unit();
    Ok(img)
}

/// Crop a 128x128 window centered at `center_x` from a 128-high image
/// tensor, zero-padded at the line ends.
pub fn char_crop(img: &Tensor, center_x: f64) -> Result<Tensor> {
    let (b, c, h, w) = img.dims4()?;
    if h != STRUCT_SIZE {
        return Err(Error::ShapeMismatch(format!("char_crop expects height 128, got {h}")));
    }
    let x0 = center_x.round() as isize - (STRUCT_SIZE as isize) / 2;
    let lo = x0.max(0) as usize;
    let hi = ((x0 + STRUCT_SIZE as isize).min(w as isize)).max(0) as usize;
    let slice = img.narrow(3, lo, hi.saturating_sub(lo).max(1))?;
    let pad_left = (lo as isize - x0) as usize;
    let pad_right = STRUCT_SIZE - pad_left - (hi - lo);
    let mut out = slice;
    if pad_left > 0 {
        out = Tensor::cat(
            &[Tensor::zeros((b, c, h, pad_left), out.dtype(), out.device())?, out],
            3,
        )?;
    }
    if pad_right > 0 {
        let zeros = Tensor::zeros((b, c, h, pad_right), out.dtype(), out.device())?;
        out = Tensor::cat(&[out, zeros], 3)?;
    }
    Ok(out)
}

/// Build the per-line composed priors from the predicted labels/centers.
/// Tap features are detached: the prior stack is fine-tuned only through
/// the structure loss, at its own learning rate.
pub fn compose_for_line(
    net: &SrNet,
    prior: &PriorModel,
    style: &StyleEncoder,
    lr_img: &RgbImage,
    labels: &[u32],
    centers_hr: &[f32],
    valid_width_hr: usize,
    canvas_width_hr: usize,
) -> Result<(Option<ComposedPriors>, Option<(Tensor, Tensor)>)> {
    if labels.is_empty() || net.cfg.prior_mode == PriorMode::UnetOnly {
        return Ok((None, None));
    }
    let device = net.store.device();
    let ws = style.encode_styles(lr_img, centers_hr, valid_width_hr)?;
    let w32 = canvas_width_hr * 32 / HR_HEIGHT;
    let w64 = canvas_width_hr * 64 / HR_HEIGHT;
    match net.cfg.prior_mode {
        PriorMode::UnetOnly => unreachable!("handled above"),
        PriorMode::CodesOnly => {
            // Splat a projection of the raw codes into each window; the
            // projections sit in the SR parameter group and train through
            // the SR losses (the canvas stays differentiable).
            let codes = prior.lookup(labels)?.detach();
            let k = labels.len();
            let t32 = net
                .code_proj32
                .forward(&codes)?
                .reshape((k, tap_channels(32), 1, 1))?
                .broadcast_as((k, tap_channels(32), 32, 32))?
                .contiguous()?;
            let t64 = net
                .code_proj64
                .forward(&codes)?
                .reshape((k, tap_channels(64), 1, 1))?
                .broadcast_as((k, tap_channels(64), 64, 64))?
                .contiguous()?;
            let canvas32 = compose_prior_canvas(&t32, centers_hr, 32, w32)?;
            let canvas64 = compose_prior_canvas(&t64, centers_hr, 64, w64)?;
            Ok((
                Some(ComposedPriors { canvas32: Some(canvas32), canvas64: Some(canvas64), structures: None }),
                None,
            ))
        }
        mode => {
            let codes = match mode {
                PriorMode::Full => prior.lookup(labels)?,
                // Codebook removed: per-character LR features (via the
                // style pathway) drive the generator input instead.
                PriorMode::LrFeat => ws.clone(),
                _ => unreachable!(),
            };
            let generated = prior.generate(&codes, &ws)?;
            let canvas32 = compose_prior_canvas(&generated.feat32.detach(), centers_hr, 32, w32)?;
            let canvas64 = compose_prior_canvas(&generated.feat64.detach(), centers_hr, 64, w64)?;
            let _ = device;
            Ok((
                Some(ComposedPriors {
                    canvas32: Some(canvas32),
                    canvas64: Some(canvas64),
                    structures: Some(generated.image.clone()),
                }),
                Some((generated.image, ws)),
            ))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SrTrainConfig {
    pub sr: SrConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            sr: SrConfig::default(),
            batch_size: 2,
            lr: 2e-4,
            finetune_lr: 1e-6,
            steps: 600,
            steps_per_epoch: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SrTrainLog {
    pub rec: Vec<f64>,
    pub adv_g: Vec<f64>,
    pub adv_d: Vec<f64>,
    pub str_loss: Vec<f64>,
    pub epoch_rec: Vec<f64>,
    pub ocr_checksums_unchanged: bool,
    pub pred_match_rate: f64,
}

pub struct SrTrainInputs<'a> {
    pub samples: &'a [TextSample],
    pub charset: &'a CharsetTable,
    pub prior_path: &'a Path,
    pub style_path: &'a Path,
    pub cls_path: &'a Path,
    pub loc_path: &'a Path,
}

/// Train the SR branch; the prior stack fine-tunes at `finetune_lr` through
/// the structure loss, recognition heads stay frozen.
pub fn train_sr(
    inputs: &SrTrainInputs,
    cfg: &SrTrainConfig,
    out_dir: &Path,
) -> Result<(SrNet, SrTrainLog)> {
    use crate::ocr;
    cfg.sr.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let charset = inputs.charset;
    let prior = PriorModel::load(inputs.prior_path, charset)?;
    let style = StyleEncoder::load(inputs.style_path, charset)?;
    let cls = ocr::CharClassifier::load(inputs.cls_path, charset)?;
    let loc = ocr::LocationPredictor::load(inputs.loc_path, charset)?;
    let net = SrNet::new(charset, &cfg.sr, cfg.seed)?;
    let device = net.store.device().clone();
    let extractor = crate::perceptual::RandomFeatures::new()?;

    let cls_sum_before = cls.store.checksum();
    let loc_sum_before = loc.store.checksum();

    let samples: Vec<&TextSample> = inputs
        .samples
        .iter()
        .filter(|s| s.lr.is_some() && s.scale == Some(cfg.sr.scale))
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "no samples degraded at scale {}",
            cfg.sr.scale
        )));
    }

    // The heads are frozen, so their per-sample predictions are constants:
    // decode once up front.
    let mut predictions: Vec<(Vec<u32>, Vec<f32>)> = Vec::with_capacity(samples.len());
    let mut matches = 0usize;
    for s in &samples {
        let lr_img = s.lr.as_ref().expect("filtered");
        let input = ocr::image_to_input(&ocr::preprocess(lr_img), &device)?;
        let labels = cls.decode(&input)?.labels;
        let centers = loc.decode(&input)?.denorm_centers(s.valid_width);
        let usable = labels.len() == s.k() && centers.len() == s.k();
        if usable && labels == s.labels {
            matches += 1;
        }
        if usable {
            predictions.push((labels, centers));
        } else {
            // Fall back to ground truth so training continues on sane
            // alignments; logged via pred_match_rate.
            predictions.push((s.labels.clone(), s.centers.clone()));
        }
    }
    let mut log = SrTrainLog {
        pred_match_rate: matches as f64 / samples.len() as f64,
        ..Default::default()
    };

    let sr_params = net.store.entries_with_prefix("sr.");
    let disc_params = net.store.entries_with_prefix("disc.");
    let mut prior_params: Vec<_> = crate::priorgen::PRIOR_STACK_PREFIXES
        .iter()
        .flat_map(|p| prior.store.entries_with_prefix(p))
        .collect();
    prior_params.extend(style.store.entries());

    let mut adam_sr = Adam::gan(cfg.lr);
    let mut adam_d = Adam::gan(cfg.lr);
    let mut adam_ft = Adam::standard(cfg.finetune_lr);
    let mut plateau = PlateauDecay::new(150);
    let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::derive_seed(cfg.seed, 0x5151));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = 0usize;

    for step in 0..cfg.steps {
        let mut idxs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == 0 {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
            }
            idxs.push(order[cursor]);
            cursor = (cursor + 1) % order.len();
        }

        let mut rec_total: Option<Tensor> = None;
        let mut str_total: Option<Tensor> = None;
        let mut g_adv_total: Option<Tensor> = None;
        let mut d_total: Option<Tensor> = None;
        for &si in &idxs {
            let sample = samples[si];
            let (labels, centers) = &predictions[si];
            let lr_img = sample.lr.as_ref().expect("filtered");
            let lr_t = image_to_batch(lr_img, &device)?;
            let hr_t = image_to_batch(&sample.hr, &device)?;
            let bic = image_to_batch(
                &crate::degrade::bicubic_up(lr_img, cfg.sr.scale),
                &device,
            )?;
            let (priors, str_pair) = compose_for_line(
                &net,
                &prior,
                &style,
                lr_img,
                labels,
                centers,
                sample.valid_width,
                sample.valid_width,
            )?;
            let sr = net.forward(&lr_t, priors.as_ref(), &bic)?;
            let rec = loss_rec(&sr, &hr_t, cfg.sr.lambda_percep, Some(&extractor))?;
            rec_total = Some(match rec_total {
                Some(t) => (t + &rec)?,
                None => rec.clone(),
            });

            // Structure fine-tuning loss on aligned characters.
            if let Some((gen_images, _ws)) = &str_pair {
                if labels == &sample.labels {
                    let gts: Vec<&crate::image::GrayImage> = sample.structures.iter().collect();
                    let gt = crate::priorgen::structures_to_tensor(&gts, &device)?;
                    let ls = loss_str(gen_images, &gt)?;
                    str_total = Some(match str_total {
                        Some(t) => (t + &ls)?,
                        None => ls,
                    });
                }
            }

            // Adversarial losses on sampled character crops.
            if cfg.sr.disc != DiscMode::Off && !labels.is_empty() {
                let count = labels.len().min(cfg.sr.adv_chars_per_line);
                let mut picked: Vec<usize> = (0..labels.len()).collect();
                use rand::seq::SliceRandom;
                picked.shuffle(&mut rng);
                picked.truncate(count);
                for &ci in &picked {
                    let center = centers[ci] as f64;
                    let real_crop = char_crop(&hr_t, center)?;
                    let fake_crop = char_crop(&sr, center)?;
                    let (real_s, fake_s) = match (cfg.sr.disc, &priors) {
                        (DiscMode::StructureCond, Some(p)) => {
                            let gt_struct = crate::priorgen::structures_to_tensor(
                                &[&sample.structures[ci.min(sample.structures.len() - 1)]],
                                &device,
                            )?;
                            let gen_struct = p
                                .structures
                                .as_ref()
                                .map(|s| s.narrow(0, ci, 1))
                                .transpose()?
                                .map(|s| s.detach());
                            (Some(gt_struct), gen_struct)
                        }
                        _ => (None, None),
                    };
                    if cfg.sr.disc == DiscMode::StructureCond && fake_s.is_none() {
                        continue;
                    }
                    let d_real = net.disc.forward(&real_crop.detach(), real_s.as_ref())?;
                    let d_fake = net.disc.forward(&fake_crop.detach(), fake_s.as_ref())?;
                    let (ld, _) = loss_adv(&d_real, &d_fake)?;
                    d_total = Some(match d_total {
                        Some(t) => (t + &ld)?,
                        None => ld,
                    });
                    let g_fake = net.disc.forward(&fake_crop, fake_s.as_ref())?;
                    let lg = hinge_g_loss(&g_fake)?;
                    g_adv_total = Some(match g_adv_total {
                        Some(t) => (t + &lg)?,
                        None => lg,
                    });
                }
            }
        }

        // Discriminator step.
        if let Some(d_loss) = d_total {
            let d_loss = (d_loss / (cfg.batch_size as f64))?;
            let v = d_loss.to_scalar::<f32>()? as f64;
            if !v.is_finite() {
                return Err(Error::Diverged { step, what: "sr discriminator".into() });
            }
            let grads = d_loss.backward()?;
            adam_d.step(&disc_params, &grads)?;
            log.adv_d.push(v);
        }

        // Generator (SR branch) step.
        let rec = rec_total.expect("non-empty batch");
        let rec = (rec / (cfg.batch_size as f64))?;
        let mut g_loss = rec.clone();
        if let Some(ga) = g_adv_total {
            let ga = (ga / (cfg.batch_size as f64))?;
            log.adv_g.push(ga.to_scalar::<f32>()? as f64);
            g_loss = (g_loss + (ga * cfg.sr.lambda_adv)?)?;
        }
        let rec_val = rec.to_scalar::<f32>()? as f64;
        if !rec_val.is_finite() {
            return Err(Error::Diverged { step, what: "sr reconstruction".into() });
        }
        let grads = g_loss.backward()?;
        adam_sr.step(&sr_params, &grads)?;
        log.rec.push(rec_val);

        // Prior-stack fine-tuning at its own (tiny) learning rate.
        if let Some(ls) = str_total {
            let ls = (ls / (cfg.batch_size as f64))?;
            let v = ls.to_scalar::<f32>()? as f64;
            if v.is_finite() {
                let grads = ls.backward()?;
                adam_ft.step(&prior_params, &grads)?;
                log.str_loss.push(v);
            }
        }

        let mut lr_now = adam_sr.lr;
        if plateau.observe(rec_val, &mut lr_now).is_some() {
            adam_sr.lr = lr_now;
            adam_d.lr = lr_now;
        }

        if (step + 1) % cfg.steps_per_epoch == 0 || step + 1 == cfg.steps {
            let window = cfg.steps_per_epoch.min(log.rec.len());
            let mean = log.rec[log.rec.len() - window..].iter().sum::<f64>() / window as f64;
            log.epoch_rec.push(mean);
            let epoch = (step + 1) / cfg.steps_per_epoch;
            save_sr_stage(&net, &prior, &style, inputs, cfg, out_dir, Some(epoch), &[
                ("sr", &adam_sr),
                ("d", &adam_d),
                ("ft", &adam_ft),
            ])?;
        }
    }

    log.ocr_checksums_unchanged =
        cls.store.checksum() == cls_sum_before && loc.store.checksum() == loc_sum_before;
    if !log.ocr_checksums_unchanged {
        return Err(Error::Checkpoint("frozen recognition heads drifted during SR training".into()));
    }

    save_sr_stage(&net, &prior, &style, inputs, cfg, out_dir, None, &[
        ("sr", &adam_sr),
        ("d", &adam_d),
        ("ft", &adam_ft),
    ])?;
    std::fs::write(
        out_dir.join("sr_train_log.toml"),
        toml::to_string(&log).map_err(|e| Error::TomlSer(e.to_string()))?,
    )?;
    Ok((net, log))
}

/// Write the SR checkpoint plus the fine-tuned prior and style stacks.
fn save_sr_stage(
    net: &SrNet,
    prior: &PriorModel,
    style: &StyleEncoder,
    inputs: &SrTrainInputs,
    cfg: &SrTrainConfig,
    out_dir: &Path,
    epoch: Option<usize>,
    opts: &[(&str, &Adam)],
) -> Result<()> {
    let suffix = match epoch {
        Some(e) => format!("_epoch{e:03}"),
        None => String::new(),
    };
    let mut meta = BTreeMap::new();
    meta.insert("train_config".to_string(), crate::config::to_canonical_toml(cfg)?);
    meta.insert("cls_ckpt_hash".to_string(), crate::styleenc::file_hash(inputs.cls_path)?);
    meta.insert("loc_ckpt_hash".to_string(), crate::styleenc::file_hash(inputs.loc_path)?);
    net.save(&out_dir.join(format!("sr{suffix}.safetensors")), &meta, opts)?;
    prior.save(&out_dir.join(format!("prior_finetuned{suffix}.safetensors")), &BTreeMap::new(), &[])?;
    style.save(&out_dir.join(format!("style_finetuned{suffix}.safetensors")), &BTreeMap::new(), None)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use crate::nn::init::randn_tensor;

    #[test]
    fn canvas_is_zero_outside_windows_and_additive() {
        let dev = device();
        let mut rng = crate::nn::init::rng_for(0, "canvas");
        let taps = randn_tensor(&mut rng, &[2, 3, 32, 32], &dev).unwrap();
        let centers = [80.0f32, 140.0];
        let canvas = compose_prior_canvas(&taps, &centers, 32, 96).unwrap();
        assert_eq!(canvas.tensor.dims(), &[1, 3, 32, 96]);
        let vals = canvas.tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let tap_vals = taps.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // Expected support: windows centered at 20 and 35 in canvas columns.
        let x0a = 20 - 16;
        let x0b = 35 - 16;
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..96 {
                    let mut expect = 0.0f32;
                    let xa = x as isize - x0a;
                    if (0..32).contains(&xa) {
                        expect += tap_vals[((ch * 32) + y) * 32 + xa as usize];
                    }
                    let xb = x as isize - x0b;
                    if (0..32).contains(&xb) {
                        expect += tap_vals[(((3 + ch) * 32) + y) * 32 + xb as usize];
                    }
                    let got = vals[(ch * 32 + y) * 96 + x];
                    assert!((got - expect).abs() < 1e-6, "mismatch at {ch},{y},{x}");
                }
            }
        }
    }

    #[test]
    fn canvas_is_permutation_invariant() {
        let dev = device();
        let mut rng = crate::nn::init::rng_for(1, "canvas.perm");
        let taps = randn_tensor(&mut rng, &[3, 2, 32, 32], &dev).unwrap();
        let centers = [40.0f32, 60.0, 100.0];
        let a = compose_prior_canvas(&taps, &centers, 32, 64).unwrap();
        // Permute characters 0 and 2.
        let perm = Tensor::cat(
            &[
                taps.narrow(0, 2, 1).unwrap(),
                taps.narrow(0, 1, 1).unwrap(),
                taps.narrow(0, 0, 1).unwrap(),
            ],
            0,
        )
        .unwrap();
        let centers_p = [100.0f32, 60.0, 40.0];
        let b = compose_prior_canvas(&perm, &centers_p, 32, 64).unwrap();
        assert_eq!(
            a.tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn zero_taps_give_zero_canvas() {
        let dev = device();
        let taps = Tensor::zeros((1, 2, 64, 64), candle_core::DType::F32, &dev).unwrap();
        let canvas = compose_prior_canvas(&taps, &[50.0], 64, 128).unwrap();
        let vals = canvas.tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sptm_identity_hook_and_stats() {
        let dev = device();
        let store = ParamStore::new(5);
        let sptm = Sptm::new(&store.root().sub("s"), 8, 4).unwrap();
        let mut rng = crate::nn::init::rng_for(2, "sptm");
        let lr_feat = randn_tensor(&mut rng, &[1, 8, 32, 48], &dev).unwrap();
        let canvas = ((randn_tensor(&mut rng, &[1, 4, 32, 48], &dev).unwrap() * 3.0).unwrap()
            + 0.5)
            .unwrap();
        // Identity hook returns the LR features bitwise.
        let hooked = sptm.forward(&lr_feat, &canvas, true).unwrap();
        assert_eq!(
            hooked.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            lr_feat.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        // Zero-init gamma/beta: fresh module is the identity too.
        let out = sptm.forward(&lr_feat, &canvas, false).unwrap();
        let d = (out - &lr_feat).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-6, "zero-init sptm should start as identity, diff {d}");
        // Post-AdaIN statistics match the LR features. With differing
        // channel counts every canvas channel maps onto the LR features'
        // channel-pooled statistics.
        let normed = sptm.normalize_canvas(&lr_feat, &canvas).unwrap();
        let (nm, ns) = crate::nn::blocks::instance_stats(&normed, 0.0).unwrap();
        let (lm, ls) = crate::nn::blocks::global_stats(&lr_feat, 0.0).unwrap();
        let nm = nm.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let lm = lm.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        let ns = ns.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let ls = ls.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        for c in 0..4 {
            assert!((nm[c] - lm).abs() < 1e-5, "mean ch{c}: {} vs {lm}", nm[c]);
            assert!((ns[c] - ls).abs() < 1e-4, "std ch{c}: {} vs {ls}", ns[c]);
        }
        // Matching channel counts map per-channel statistics exactly.
        let lr8 = randn_tensor(&mut rng, &[1, 4, 32, 48], &dev).unwrap();
        let normed8 = crate::nn::blocks::adain(&canvas, &lr8, 1e-5).unwrap();
        let (nm8, ns8) = crate::nn::blocks::instance_stats(&normed8, 0.0).unwrap();
        let (lm8, ls8) = crate::nn::blocks::instance_stats(&lr8, 0.0).unwrap();
        let dm = (nm8 - lm8).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        let ds = (ns8 - ls8).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(dm < 1e-5 && ds < 1e-4, "per-channel adain off: {dm}/{ds}");
        // Degenerate all-zero canvas stays finite.
        let zero = Tensor::zeros((1, 4, 32, 48), candle_core::DType::F32, &dev).unwrap();
        let out = sptm.forward(&lr_feat, &zero, false).unwrap();
        assert!(out
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn loss_closed_forms() {
        let dev = device();
        let a = Tensor::full(0.6f32, (1, 3, 8, 8), &dev).unwrap();
        let b = Tensor::full(0.5f32, (1, 3, 8, 8), &dev).unwrap();
        let l = loss_rec(&a, &b, 0.0, None).unwrap().to_scalar::<f32>().unwrap();
        assert!((l - 0.1).abs() < 1e-6);
        let z = loss_rec(&a, &a, 0.0, None).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(z, 0.0);

        let ones = Tensor::ones((1, 1, 128, 128), candle_core::DType::F32, &dev).unwrap();
        let zeros = Tensor::zeros((1, 1, 128, 128), candle_core::DType::F32, &dev).unwrap();
        let ls = loss_str(&ones, &zeros).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(ls, 1.0);
        assert_eq!(loss_str(&ones, &ones).unwrap().to_scalar::<f32>().unwrap(), 0.0);

        let real = Tensor::from_vec(vec![2.0f32], (1, 1), &dev).unwrap();
        let fake = Tensor::from_vec(vec![-2.0f32], (1, 1), &dev).unwrap();
        let (ld, lg) = loss_adv(&real, &fake).unwrap();
        assert_eq!(ld.to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(lg.to_scalar::<f32>().unwrap(), 2.0);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let charset = CharsetTable::digits();
        let cfg = SrConfig::default();
        let net = SrNet::new(&charset, &cfg, 3).unwrap();
        let dev = device();
        let mut rng = crate::nn::init::rng_for(3, "sr.fwd");
        let lr = randn_tensor(&mut rng, &[1, 3, 32, 128], &dev).unwrap();
        let bic = randn_tensor(&mut rng, &[1, 3, 128, 512], &dev).unwrap();
        let a = net.forward(&lr, None, &bic).unwrap();
        assert_eq!(a.dims(), &[1, 3, 128, 512]);
        let b = net.forward(&lr, None, &bic).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn all_variants_are_constructible_and_run() {
        let charset = CharsetTable::digits();
        let dev = device();
        let mut rng = crate::nn::init::rng_for(4, "variants");
        let lr = randn_tensor(&mut rng, &[1, 3, 32, 64], &dev).unwrap();
        let bic = randn_tensor(&mut rng, &[1, 3, 128, 256], &dev).unwrap();
        for name in ["full", "unet", "wo_s", "wo_c", "s32", "s64", "d_minus"] {
            let cfg = SrConfig::variant(name, 4).unwrap();
            let net = SrNet::new(&charset, &cfg, 1).unwrap();
            let out = net.forward(&lr, None, &bic).unwrap();
            assert_eq!(out.dims(), &[1, 3, 128, 256], "variant {name}");
        }
        assert!(SrConfig::variant("bogus", 4).is_err());
    }
}
