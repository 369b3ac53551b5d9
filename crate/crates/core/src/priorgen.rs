//! Codebook-conditioned generative structure prior.
//!
//! A learnable code per character replaces the generator's constant input;
//! a mapping network turns Gaussian samples into style latents `w` that
//! control typeface, size, location, orientation and perspective. The
//! synthesis path contains no stochastic inputs: generation is a pure
//! function of `(code, w)`. Intermediate features at 32x32 and 64x64 are
//! tapped as the structure prior consumed by the SR network.

use crate::charset::CharsetTable;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::blocks::{leaky_relu, upsample2x, Conv2d, Linear, ModConv};
use crate::nn::init::{randn_tensor, Init};
use crate::nn::vars::{load_safetensors, save_safetensors};
use crate::nn::{Adam, ParamStore, PlateauDecay};
use crate::synth::render::{render_structure, StructGeometry};
use crate::synth::FontSet;
use crate::{LATENT_DIM, STRUCT_SIZE};
use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Channel plan: (resolution, channels) from the 4x4 base to the output.
const CHANNEL_PLAN: [(usize, usize); 6] =
    [(4, 48), (8, 48), (16, 40), (32, 32), (64, 16), (128, 8)];

/// Tap resolutions feeding the SR transform.
pub const TAP_RES: [usize; 2] = [32, 64];

pub fn tap_channels(res: usize) -> usize {
    CHANNEL_PLAN
        .iter()
        .find(|(r, _)| *r == res)
        .map(|(_, c)| *c)
        .expect("tap resolution in plan")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the recognition loss against the adversarial loss.
    pub recog_weight: f64,
    pub steps: usize,
    /// Steps per "epoch": checkpoint + accuracy eval cadence.
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Structure-pair augmentation ranges.
    pub aug: StructAugConfig,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 2e-4,
            recog_weight: 1.0,
            steps: 1200,
            steps_per_epoch: 200,
            seed: 0,
            aug: StructAugConfig::default(),
        }
    }
}

/// Randomized style for ground-truth structure glyphs: font, size,
/// rotation, shear (local perspective) and sub-window offset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StructAugConfig {
    pub font_px: [f32; 2],
    pub rotation_deg: f32,
    /// Probability of a non-zero rotation.
    pub rotation_prob: f32,
    pub shear: f32,
    pub offset_px: f32,
}

impl Default for StructAugConfig {
    fn default() -> Self {
        Self {
            font_px: [56.0, 108.0],
            rotation_deg: 45.0,
            rotation_prob: 0.5,
            shear: 0.12,
            offset_px: 10.0,
        }
    }
}

/// Draw one randomized structure-glyph geometry.
pub fn sample_geometry(aug: &StructAugConfig, rng: &mut impl Rng) -> StructGeometry {
    let px = rng.gen_range(aug.font_px[0]..=aug.font_px[1]);
    let rot = if rng.gen_range(0.0f32..1.0) < aug.rotation_prob {
        rng.gen_range(-aug.rotation_deg..=aug.rotation_deg)
    } else {
        0.0
    };
    let (s, c) = (rot as f64).to_radians().sin_cos();
    let shear_x = rng.gen_range(-aug.shear..=aug.shear) as f64;
    let shear_y = rng.gen_range(-aug.shear..=aug.shear) as f64;
    // shear composed with rotation
    let linear = [c + shear_x * s, -s + shear_x * c, s + shear_y * c, c - shear_y * s];
    let half = STRUCT_SIZE as f64 / 2.0;
    let dx = rng.gen_range(-aug.offset_px..=aug.offset_px) as f64;
    let dy = rng.gen_range(-aug.offset_px..=aug.offset_px) as f64;
    StructGeometry { font_px: px, linear, pivot_in_window: (half + dx, half + dy) }
}

/// `(label, binary structure image)` pairs with randomized styles: the
/// training set of the prior stage.
pub fn build_structure_dataset(
    charset: &CharsetTable,
    fonts: &FontSet,
    aug: &StructAugConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<(u32, GrayImage)>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..8 {
                let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::derive_seed(
                    seed,
                    i * 16 + attempt,
                ));
                let label = rng.gen_range(0..charset.len() as u32);
                let ch = charset.char_at(label).expect("label in range");
                let eligible = fonts.covering(&ch.to_string());
                if eligible.is_empty() {
                    continue;
                }
                let font = eligible[rng.gen_range(0..eligible.len())];
                let geom = sample_geometry(aug, &mut rng);
                match render_structure(fonts, font, ch, &geom) {
                    Ok(img) => return Ok((label, img)),
                    Err(_) => continue,
                }
            }
            Err(Error::Render("structure sample synthesis failed".into()))
        })
        .collect()
}

/// Mapping network `z -> w`: pixel norm then a 3-layer MLP.
#[derive(Clone)]
pub struct MappingNetwork {
    layers: Vec<Linear>,
}

impl MappingNetwork {
    fn new(scope: &crate::nn::Scope) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..3 {
            layers.push(Linear::new(&scope.sub(&format!("l{i}")), LATENT_DIM, LATENT_DIM, true)?);
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let ms = (z.sqr()?.mean_keepdim(candle_core::D::Minus1)? + 1e-8)?.sqrt()?;
        let mut x = z.broadcast_div(&ms)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }
}

/// Structure generator: code-derived 4x4 base, modulated 3x3 convs with
/// nearest upsampling, single-channel sigmoid output. No noise inputs.
#[derive(Clone)]
pub struct StructureGenerator {
    base: Linear,
    convs: Vec<ModConv>,
    to_image: ModConv,
}

impl StructureGenerator {
    fn new(scope: &crate::nn::Scope) -> Result<Self> {
        let base = Linear::new(&scope.sub("base"), LATENT_DIM, CHANNEL_PLAN[0].1 * 16, true)?;
        let mut convs = Vec::new();
        for i in 0..CHANNEL_PLAN.len() {
            let in_ch = if i == 0 { CHANNEL_PLAN[0].1 } else { CHANNEL_PLAN[i - 1].1 };
            let out_ch = CHANNEL_PLAN[i].1;
            convs.push(ModConv::new(
                &scope.sub(&format!("b{}", CHANNEL_PLAN[i].0)),
                in_ch,
                out_ch,
                3,
                LATENT_DIM,
            )?);
        }
        let mut to_image = ModConv::new(
            &scope.sub("to_image"),
            CHANNEL_PLAN.last().expect("plan").1,
            1,
            1,
            LATENT_DIM,
        )?;
        to_image.demodulate = false;
        Ok(Self { base, convs, to_image })
    }
}

/// One generated structure prior batch: tap features plus the structure
/// image, all from the same forward pass.
pub struct StructurePrior {
    /// `(B, C32, 32, 32)`
    pub feat32: Tensor,
    /// `(B, C64, 64, 64)`
    pub feat64: Tensor,
    /// `(B, 1, 128, 128)`, values in `[0, 1]`.
    pub image: Tensor,
}

/// Recognition head over structure images: M-way classifier.
#[derive(Clone)]
pub struct RecognizerHead {
    convs: Vec<Conv2d>,
    out: Linear,
}

impl RecognizerHead {
    fn new(scope: &crate::nn::Scope, classes: usize) -> Result<Self> {
        let chans = [1usize, 16, 32, 48, 64];
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(Conv2d::new(&scope.sub(&format!("c{i}")), chans[i], chans[i + 1], 3, 2, 1)?);
        }
        let out = Linear::new(&scope.sub("out"), 64, classes, true)?;
        Ok(Self { convs, out })
    }

    /// `x`: `(B, 1, 128, 128)` -> `(B, M)` logits. The input is pooled to
    /// 64x64 first; structure classification does not need full detail.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.avg_pool2d(2)?;
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        let h = h.mean(3)?.mean(2)?;
        self.out.forward(&h)
    }
}

/// Hinge discriminator over structure images (training only).
#[derive(Clone)]
pub struct StructDiscriminator {
    convs: Vec<Conv2d>,
    out: Linear,
}

impl StructDiscriminator {
    fn new(scope: &crate::nn::Scope) -> Result<Self> {
        let chans = [1usize, 16, 32, 48, 64];
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push(Conv2d::new(&scope.sub(&format!("c{i}")), chans[i], chans[i + 1], 3, 2, 1)?);
        }
        let out = Linear::new(&scope.sub("out"), 64 * 16, 1, true)?;
        Ok(Self { convs, out })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.avg_pool2d(2)?;
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        let (b, _, _, _) = h.dims4()?;
        self.out.forward(&h.reshape((b, 64 * 16))?)
    }
}

/// The full prior stack: codebook, mapping network, generator, recognizer
/// (and the training-only discriminator).
pub struct PriorModel {
    pub store: ParamStore,
    pub codebook: Var,
    pub mapping: MappingNetwork,
    pub generator: StructureGenerator,
    pub recognizer: RecognizerHead,
    pub discriminator: StructDiscriminator,
    pub charset_hash: String,
    pub classes: usize,
}

/// Parameter-name prefixes of the pieces fine-tuned in the SR stage.
pub const PRIOR_STACK_PREFIXES: [&str; 3] = ["codebook", "map.", "gen."];

impl PriorModel {
    pub fn new(charset: &CharsetTable, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let root = store.root();
        let codebook =
            store.param("codebook", &[charset.len(), LATENT_DIM], Init::Normal { std: 1.0 })?;
        let mapping = MappingNetwork::new(&root.sub("map"))?;
        let generator = StructureGenerator::new(&root.sub("gen"))?;
        let recognizer = RecognizerHead::new(&root.sub("recog"), charset.len())?;
        let discriminator = StructDiscriminator::new(&root.sub("disc"))?;
        Ok(Self {
            store,
            codebook,
            mapping,
            generator,
            recognizer,
            discriminator,
            charset_hash: charset.hash().to_string(),
            classes: charset.len(),
        })
    }

    /// Row lookup; gradients flow to the selected rows.
    pub fn lookup(&self, indices: &[u32]) -> Result<Tensor> {
        for &i in indices {
            if i as usize >= self.classes {
                return Err(Error::invalid(format!("code index {i} >= M={}", self.classes)));
            }
        }
        let idx = Tensor::from_vec(indices.to_vec(), indices.len(), self.store.device())?;
        Ok(self.codebook.as_tensor().index_select(&idx, 0)?)
    }

    pub fn map_w(&self, z: &Tensor) -> Result<Tensor> {
        self.mapping.forward(z)
    }

    /// Deterministic synthesis `(codes, w) -> prior`. `codes`, `w`: `(B, 512)`.
    pub fn generate(&self, codes: &Tensor, w: &Tensor) -> Result<StructurePrior> {
        let (b, d) = codes.dims2()?;
        let (bw, dw) = w.dims2()?;
        if d != LATENT_DIM || dw != LATENT_DIM || b != bw {
            return Err(Error::ShapeMismatch(format!(
                "generate: codes {:?} vs w {:?}",
                codes.dims(),
                w.dims()
            )));
        }
        let mut x = self.generator.base.forward(codes)?.reshape((b, CHANNEL_PLAN[0].1, 4, 4))?;
        let mut feat32 = None;
        let mut feat64 = None;
        for (i, conv) in self.generator.convs.iter().enumerate() {
            if i > 0 {
                x = upsample2x(&x)?;
            }
            x = leaky_relu(&conv.forward(&x, w)?, 0.2)?;
            match CHANNEL_PLAN[i].0 {
                32 => feat32 = Some(x.clone()),
                64 => feat64 = Some(x.clone()),
                _ => {}
            }
        }
        let image = candle_nn::ops::sigmoid(&self.generator.to_image.forward(&x, w)?)?;
        Ok(StructurePrior {
            feat32: feat32.expect("32x32 tap"),
            feat64: feat64.expect("64x64 tap"),
            image,
        })
    }

    pub fn generate_for_labels(&self, labels: &[u32], w: &Tensor) -> Result<StructurePrior> {
        self.generate(&self.lookup(labels)?, w)
    }

    /// Structure images along the straight path from `w_a` to `w_b`.
    /// Endpoints are produced by direct generation (bit-exact).
    pub fn interpolate_styles(
        &self,
        label: u32,
        w_a: &Tensor,
        w_b: &Tensor,
        steps: usize,
    ) -> Result<Vec<GrayImage>> {
        if steps < 2 {
            return Err(Error::invalid("interpolation needs steps >= 2"));
        }
        let code = self.lookup(&[label])?;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let w = if t == 0 {
                w_a.clone()
            } else if t == steps - 1 {
                w_b.clone()
            } else {
                let alpha = t as f64 / (steps - 1) as f64;
                ((w_a * (1.0 - alpha))? + (w_b * alpha)?)?
            };
            let prior = self.generate(&code, &w)?;
            out.push(image_tensor_to_gray(&prior.image)?);
        }
        Ok(out)
    }

    /// Inputs of the synthesis path. There is deliberately no noise input;
    /// tests assert this inventory and repeated-call equality.
    pub fn synthesis_inputs(&self) -> Vec<&'static str> {
        vec!["code", "w"]
    }

    pub fn save(
        &self,
        path: &Path,
        extra_meta: &BTreeMap<String, String>,
        opts: &[(&str, &Adam)],
    ) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .store
            .entries()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "prior".to_string());
        meta.insert("charset_hash".to_string(), self.charset_hash.clone());
        meta.insert("classes".to_string(), self.classes.to_string());
        for (k, v) in extra_meta {
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
            .ok_or_else(|| Error::Checkpoint("prior checkpoint missing charset hash".into()))?;
        charset.check_hash(hash, "prior checkpoint")?;
        let model = Self::new(charset, 0)?;
        let model_params = model.store.entries().len();
        let loaded = model.store.load_from(&tensors)?;
        if loaded != model_params {
            return Err(Error::Checkpoint(format!(
                "prior checkpoint loaded {loaded}/{model_params} params"
            )));
        }
        Ok(model)
    }
}

pub fn image_tensor_to_gray(image: &Tensor) -> Result<GrayImage> {
    let dims = image.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let data = image.flatten_all()?.to_vec1::<f32>()?;
    GrayImage::from_data(h, w, data[..h * w].to_vec())
}

pub fn structures_to_tensor(images: &[&GrayImage], device: &candle_core::Device) -> Result<Tensor> {
    let b = images.len();
    let mut data = Vec::with_capacity(b * STRUCT_SIZE * STRUCT_SIZE);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (b, 1, STRUCT_SIZE, STRUCT_SIZE), device)?)
}

/// Training log: losses plus the generated-sample recognition accuracy at
/// each epoch boundary.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PriorTrainLog {
    pub d_loss: Vec<f64>,
    pub g_adv: Vec<f64>,
    pub g_recog: Vec<f64>,
    pub recog_real_ce: Vec<f64>,
    pub epoch_generated_accuracy: Vec<f64>,
}

/// Recognition accuracy of generated samples: argmax of the co-trained
/// recognizer against the conditioning label, over fresh style draws.
pub fn generated_accuracy(model: &PriorModel, n: usize, rng: &mut ChaCha12Rng) -> Result<f64> {
    let device = model.store.device();
    let mut hits = 0usize;
    let chunk = 25usize;
    let mut done = 0usize;
    while done < n {
        let b = chunk.min(n - done);
        let labels: Vec<u32> = (0..b).map(|_| rng.gen_range(0..model.classes as u32)).collect();
        let z = randn_tensor(rng, &[b, LATENT_DIM], device)?;
        let w = model.map_w(&z)?;
        let prior = model.generate_for_labels(&labels, &w)?;
        let logits = model.recognizer.forward(&prior.image)?;
        let pred = logits.argmax(1)?.to_vec1::<u32>()?;
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        done += b;
    }
    Ok(hits as f64 / n as f64)
}

/// Argmax-level style/identity disentanglement: fraction of `(i, j, w)`
/// draws, `i != j`, where the recognizer classifies `generate(c_i, w)` as
/// `i` and `generate(c_j, w)` as `j`.
pub fn disentanglement_rate(model: &PriorModel, n: usize, rng: &mut ChaCha12Rng) -> Result<f64> {
    let device = model.store.device();
    let mut ok = 0usize;
    for _ in 0..n {
        let i = rng.gen_range(0..model.classes as u32);
        let mut j = rng.gen_range(0..model.classes as u32);
        while j == i {
            j = rng.gen_range(0..model.classes as u32);
        }
        let z = randn_tensor(rng, &[1, LATENT_DIM], device)?;
        let w = model.map_w(&z)?;
        let w2 = Tensor::cat(&[&w, &w], 0)?;
        let prior = model.generate_for_labels(&[i, j], &w2)?;
        let pred = model.recognizer.forward(&prior.image)?.argmax(1)?.to_vec1::<u32>()?;
        if pred[0] == i && pred[1] == j {
            ok += 1;
        }
    }
    Ok(ok as f64 / n as f64)
}

/// Hinge discriminator loss `-E[min(0, -1+D(real))] - E[min(0, -1-D(fake))]`.
pub fn hinge_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let real_term = ((1.0 - real)?.relu()?).mean_all()?;
    let fake_term = ((1.0 + fake)?.relu()?).mean_all()?;
    Ok((real_term + fake_term)?)
}

/// Generator hinge loss `-E[D(fake)]`.
pub fn hinge_g_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

/// Train codebook + mapping + generator (+ recognizer on real samples)
/// with hinge adversarial and recognition losses.
pub fn train_prior(
    data: &[(u32, GrayImage)],
    charset: &CharsetTable,
    cfg: &PriorTrainConfig,
    out_dir: &Path,
) -> Result<(PriorModel, PriorTrainLog)> {
    if data.is_empty() {
        return Err(Error::invalid("empty prior training set"));
    }
    for (label, _) in data {
        if *label as usize >= charset.len() {
            return Err(Error::invalid(format!("label {label} outside charset")));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let model = PriorModel::new(charset, cfg.seed)?;
    let device = model.store.device().clone();

    let gen_params: Vec<_> = PRIOR_STACK_PREFIXES
        .iter()
        .flat_map(|p| model.store.entries_with_prefix(p))
        .collect();
    let disc_params = model.store.entries_with_prefix("disc.");
    let recog_params = model.store.entries_with_prefix("recog.");

    let mut adam_g = Adam::gan(cfg.lr);
    let mut adam_d = Adam::gan(cfg.lr);
    let mut adam_r = Adam::standard(cfg.lr);
    let mut plateau = PlateauDecay::new(200);

    let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::derive_seed(cfg.seed, 0xA11CE));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = 0usize;
    let mut log = PriorTrainLog::default();

    for step in 0..cfg.steps {
        let mut labels_r = Vec::with_capacity(cfg.batch_size);
        let mut imgs_r = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == 0 {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
            }
            let (label, img) = &data[order[cursor]];
            labels_r.push(*label);
            imgs_r.push(img);
            cursor = (cursor + 1) % order.len();
        }
        let real = structures_to_tensor(&imgs_r, &device)?;
        let labels_r_t = Tensor::from_vec(labels_r.clone(), labels_r.len(), &device)?;

        // Recognizer learns from real samples only.
        let r_logits = model.recognizer.forward(&real)?;
        let r_ce = candle_nn::loss::cross_entropy(&r_logits, &labels_r_t)?;
        let r_val = r_ce.to_scalar::<f32>()? as f64;
        if !r_val.is_finite() {
            return Err(Error::Diverged { step, what: "recognizer cross-entropy".into() });
        }
        let grads = r_ce.backward()?;
        adam_r.step(&recog_params, &grads)?;

        let labels_f: Vec<u32> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..model.classes as u32)).collect();
        let z = randn_tensor(&mut rng, &[cfg.batch_size, LATENT_DIM], &device)?;
        let w = model.map_w(&z)?;
        let fake = model.generate_for_labels(&labels_f, &w)?.image;

        // Discriminator step on detached fakes.
        let d_real = model.discriminator.forward(&real)?;
        let d_fake = model.discriminator.forward(&fake.detach())?;
        let d_loss = hinge_d_loss(&d_real, &d_fake)?;
        let d_val = d_loss.to_scalar::<f32>()? as f64;
        if !d_val.is_finite() {
            return Err(Error::Diverged { step, what: "discriminator hinge".into() });
        }
        let grads = d_loss.backward()?;
        adam_d.step(&disc_params, &grads)?;

        // Generator step: adversarial + recognition on generated samples.
        let labels_f_t = Tensor::from_vec(labels_f.clone(), labels_f.len(), &device)?;
        let g_adv = hinge_g_loss(&model.discriminator.forward(&fake)?)?;
        let g_rec =
            candle_nn::loss::cross_entropy(&model.recognizer.forward(&fake)?, &labels_f_t)?;
        let g_loss = (&g_adv + (&g_rec * cfg.recog_weight)?)?;
        let g_val = g_loss.to_scalar::<f32>()? as f64;
        if !g_val.is_finite() {
            return Err(Error::Diverged { step, what: "generator loss".into() });
        }
        let grads = g_loss.backward()?;
        adam_g.step(&gen_params, &grads)?;

        log.d_loss.push(d_val);
        log.g_adv.push(g_adv.to_scalar::<f32>()? as f64);
        log.g_recog.push(g_rec.to_scalar::<f32>()? as f64);
        log.recog_real_ce.push(r_val);

        let mut lr = adam_g.lr;
        if plateau.observe(g_val, &mut lr).is_some() {
            adam_g.lr = lr;
            adam_d.lr = lr;
            adam_r.lr = lr;
        }

        if (step + 1) % cfg.steps_per_epoch == 0 || step + 1 == cfg.steps {
            let mut eval_rng =
                ChaCha12Rng::seed_from_u64(crate::synth::derive_seed(cfg.seed, 0xE7A1));
            let acc = generated_accuracy(&model, 200, &mut eval_rng)?;
            log.epoch_generated_accuracy.push(acc);
            let epoch = (step + 1) / cfg.steps_per_epoch;
            let meta = train_meta(cfg, step + 1, acc)?;
            model.save(
                &out_dir.join(format!("prior_epoch{epoch:03}.safetensors")),
                &meta,
                &[("g", &adam_g), ("d", &adam_d), ("r", &adam_r)],
            )?;
        }
    }

    let acc = *log.epoch_generated_accuracy.last().unwrap_or(&0.0);
    let meta = train_meta(cfg, cfg.steps, acc)?;
    model.save(
        &out_dir.join("prior.safetensors"),
        &meta,
        &[("g", &adam_g), ("d", &adam_d), ("r", &adam_r)],
    )?;
    std::fs::write(
        out_dir.join("prior_train_log.toml"),
        toml::to_string(&log).map_err(|e| Error::TomlSer(e.to_string()))?,
    )?;
    Ok((model, log))
}

fn train_meta(cfg: &PriorTrainConfig, steps: usize, acc: f64) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), crate::config::to_canonical_toml(cfg)?);
    meta.insert("steps".to_string(), steps.to_string());
    meta.insert("generated_accuracy".to_string(), format!("{acc:.4}"));
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn small_model() -> PriorModel {
        PriorModel::new(&CharsetTable::digits(), 7).unwrap()
    }

    #[test]
    fn lookup_shapes_and_bounds() {
        let model = small_model();
        let c = model.lookup(&[0, 3, 9]).unwrap();
        assert_eq!(c.dims(), &[3, LATENT_DIM]);
        assert!(model.lookup(&[10]).is_err());
        let c2 = model.lookup(&[0, 3, 9]).unwrap();
        assert_eq!(
            c.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            c2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn generation_is_deterministic_with_correct_taps() {
        let model = small_model();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let z = randn_tensor(&mut rng, &[2, LATENT_DIM], model.store.device()).unwrap();
        let w = model.map_w(&z).unwrap();
        let a = model.generate_for_labels(&[1, 4], &w).unwrap();
        let b = model.generate_for_labels(&[1, 4], &w).unwrap();
        assert_eq!(a.feat32.dims(), &[2, tap_channels(32), 32, 32]);
        assert_eq!(a.feat64.dims(), &[2, tap_channels(64), 64, 64]);
        assert_eq!(a.image.dims(), &[2, 1, 128, 128]);
        let va = a.image.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = b.image.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn interpolation_endpoints_match_direct_generation() {
        let model = small_model();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let wa = model
            .map_w(&randn_tensor(&mut rng, &[1, LATENT_DIM], model.store.device()).unwrap())
            .unwrap();
        let wb = model
            .map_w(&randn_tensor(&mut rng, &[1, LATENT_DIM], model.store.device()).unwrap())
            .unwrap();
        let seq = model.interpolate_styles(3, &wa, &wb, 5).unwrap();
        assert_eq!(seq.len(), 5);
        let direct_a =
            image_tensor_to_gray(&model.generate_for_labels(&[3], &wa).unwrap().image).unwrap();
        let direct_b =
            image_tensor_to_gray(&model.generate_for_labels(&[3], &wb).unwrap().image).unwrap();
        assert_eq!(seq[0].data(), direct_a.data());
        assert_eq!(seq[4].data(), direct_b.data());
        let two = model.interpolate_styles(3, &wa, &wb, 2).unwrap();
        assert_eq!(two[0].data(), direct_a.data());
        assert_eq!(two[1].data(), direct_b.data());
        assert!(model.interpolate_styles(3, &wa, &wb, 1).is_err());
    }

    #[test]
    fn hinge_loss_closed_forms() {
        let dev = crate::nn::device();
        let real = Tensor::from_vec(vec![2.0f32], (1, 1), &dev).unwrap();
        let fake = Tensor::from_vec(vec![-2.0f32], (1, 1), &dev).unwrap();
        let ld = hinge_d_loss(&real, &fake).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(ld, 0.0);
        let zero = Tensor::from_vec(vec![0.0f32], (1, 1), &dev).unwrap();
        let ld0 = hinge_d_loss(&zero, &zero).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(ld0, 2.0);
        let lg = hinge_g_loss(&zero).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(lg, 0.0);
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let model = small_model();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let acc = generated_accuracy(&model, 200, &mut rng).unwrap();
        assert!(acc < 0.5, "untrained accuracy {acc} suspiciously high");
    }

    #[test]
    fn structure_dataset_is_deterministic_and_binary() {
        let fonts = FontSet::load_dir(Path::new(crate::synth::SYSTEM_FONT_DIR)).unwrap();
        let charset = CharsetTable::digits();
        let aug = StructAugConfig::default();
        let a = build_structure_dataset(&charset, &fonts, &aug, 5, 8).unwrap();
        let b = build_structure_dataset(&charset, &fonts, &aug, 5, 8).unwrap();
        assert_eq!(a.len(), 8);
        for ((la, ia), (lb, ib)) in a.iter().zip(&b) {
            assert_eq!(la, lb);
            assert_eq!(ia.data(), ib.data());
            assert!(ia.is_binary());
            assert!(ia.foreground_count() > 0);
        }
    }

    #[test]
    fn save_load_round_trip_preserves_checksum() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.safetensors");
        model.save(&path, &BTreeMap::new(), &[]).unwrap();
        let loaded = PriorModel::load(&path, &CharsetTable::digits()).unwrap();
        assert_eq!(model.store.checksum(), loaded.store.checksum());
        assert!(PriorModel::load(&path, &CharsetTable::ascii()).is_err());
    }
}
