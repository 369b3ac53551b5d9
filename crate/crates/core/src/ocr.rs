//! Character classification and center-location prediction.
//!
//! Two independently trained heads share one architecture: a small CNN
//! backbone over the 32x256 input, a transformer encoder over the resulting
//! width tokens, and an autoregressive transformer decoder. The classifier
//! emits codebook indices plus an end token; the locator regresses one
//! center per step (as a fraction of the valid width) plus a stop flag.

use crate::charset::CharsetTable;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::blocks::{leaky_relu, Conv2d, Linear};
use crate::nn::init::Init;
use crate::nn::transformer::{causal_mask, positional_encoding, DecoderLayer, EncoderLayer};
use crate::nn::vars::{load_safetensors, save_safetensors};
use crate::nn::{Adam, ParamStore, PlateauDecay, Scope};
use crate::synth::TextSample;
use crate::MAX_TEXT_LEN;
use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const INPUT_H: usize = 32;
pub const INPUT_W: usize = 256;
const TOKENS: usize = 32;
const DIM: usize = 128;
const HEADS: usize = 4;
const FF: usize = 256;
const LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcrTask {
    Classifier,
    Locator,
}

impl OcrTask {
    pub fn stage_name(&self) -> &'static str {
        match self {
            OcrTask::Classifier => "ocr-cls",
            OcrTask::Locator => "ocr-loc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndToken,
    MaxLength,
}

/// Decoded output of either head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodedSequence {
    pub labels: Vec<u32>,
    /// Center fractions of the valid width, sorted ascending.
    pub centers_norm: Vec<f32>,
    pub stop_reason: StopReason,
    /// True when the raw location output needed sorting.
    pub sorted_warning: bool,
}

impl DecodedSequence {
    pub fn denorm_centers(&self, valid_width_hr: usize) -> Vec<f32> {
        self.centers_norm.iter().map(|&f| f * valid_width_hr as f32).collect()
    }
}

/// Normalized location targets: center-x divided by the valid width.
pub fn norm_centers(centers: &[f32], valid_width: usize) -> Vec<f32> {
    centers.iter().map(|&c| c / valid_width as f32).collect()
}

/// Resize an LR line to 32x256: height to 32 preserving aspect, then
/// right-pad with zeros (or squeeze the width when the line is too long).
pub fn preprocess(lr: &RgbImage) -> RgbImage {
    let scale = INPUT_H as f64 / lr.height as f64;
    let w = ((lr.width as f64 * scale).round() as usize).max(1);
    let resized = if w <= INPUT_W {
        crate::resample::resize_rgb(lr, INPUT_H, w, crate::resample::Filter::CatmullRom)
    } else {
        crate::resample::resize_rgb(lr, INPUT_H, INPUT_W, crate::resample::Filter::CatmullRom)
    };
    let mut out = resized.pad_right(INPUT_W).expect("width bounded");
    out.clamp_unit();
    out
}

pub fn image_to_input(img: &RgbImage, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(img.data().to_vec(), (1, 3, img.height, img.width), device)?)
}

/// CNN backbone + transformer encoder: `(B, 3, 32, 256) -> (B, 32, 128)`.
struct LineEncoder {
    convs: Vec<Conv2d>,
    enc_layers: Vec<EncoderLayer>,
    pos: Tensor,
}

impl LineEncoder {
    fn new(scope: &Scope) -> Result<Self> {
        let chans = [3usize, 24, 48, 96];
        let mut convs = Vec::new();
        for i in 0..3 {
            convs.push(Conv2d::new(&scope.sub(&format!("c{i}")), chans[i], chans[i + 1], 3, 2, 1)?);
        }
        // 1x1 projection to the token dimension after height pooling.
        convs.push(Conv2d::new(&scope.sub("proj"), 96, DIM, 1, 1, 0)?);
        let mut enc_layers = Vec::new();
        for i in 0..LAYERS {
            enc_layers.push(EncoderLayer::new(&scope.sub(&format!("enc{i}")), DIM, HEADS, FF)?);
        }
        let pos = positional_encoding(TOKENS, DIM, scope.device())?;
        Ok(Self { convs, enc_layers, pos })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs[..3] {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        // (B, 96, 4, 32) -> mean over height -> (B, 96, 1, 32)
        let h = h.mean_keepdim(2)?;
        let h = self.convs[3].forward(&h)?; // (B, DIM, 1, 32)
        let (b, d, _, t) = h.dims4()?;
        let mut tokens = h.reshape((b, d, t))?.transpose(1, 2)?.contiguous()?; // (B, T, D)
        tokens = tokens.broadcast_add(&self.pos.reshape((1, TOKENS, DIM))?)?;
        for layer in &self.enc_layers {
            tokens = layer.forward(&tokens)?;
        }
        Ok(tokens)
    }
}

struct SeqDecoder {
    layers: Vec<DecoderLayer>,
    pos: Tensor,
}

impl SeqDecoder {
    fn new(scope: &Scope) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..LAYERS {
            layers.push(DecoderLayer::new(&scope.sub(&format!("dec{i}")), DIM, HEADS, FF)?);
        }
        let pos = positional_encoding(MAX_TEXT_LEN + 1, DIM, scope.device())?;
        Ok(Self { layers, pos })
    }

    fn forward(&self, emb: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let (_, t, _) = emb.dims3()?;
        let mask = causal_mask(t, emb.device())?;
        let mut h = emb.broadcast_add(&self.pos.narrow(0, 0, t)?.reshape((1, t, DIM))?)?;
        for layer in &self.layers {
            h = layer.forward(&h, memory, &mask)?;
        }
        Ok(h)
    }
}

/// Transformer head reading character classes from an LR line.
pub struct CharClassifier {
    pub store: ParamStore,
    encoder: LineEncoder,
    decoder: SeqDecoder,
    /// Embeddings for BOS + M classes.
    embed: candle_core::Var,
    out: Linear,
    pub classes: usize,
    pub charset_hash: String,
}

impl CharClassifier {
    pub fn new(charset: &CharsetTable, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let root = store.root();
        let classes = charset.len();
        let encoder = LineEncoder::new(&root.sub("backbone"))?;
        let decoder = SeqDecoder::new(&root.sub("decoder"))?;
        let embed =
            store.param("embed", &[classes + 1, DIM], Init::Normal { std: 0.02 })?;
        let out = Linear::new(&root.sub("out"), DIM, classes + 1, true)?;
        Ok(Self { store, encoder, decoder, embed, out, classes, charset_hash: charset.hash().to_string() })
    }

    fn bos(&self) -> u32 {
        self.classes as u32
    }

    /// End-of-sequence class id in the output logits.
    pub fn eos(&self) -> u32 {
        self.classes as u32
    }

    fn embed_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, t) = tokens.dims2()?;
        let flat = tokens.reshape(b * t)?;
        let emb = self.embed.as_tensor().index_select(&flat, 0)?;
        Ok(emb.reshape((b, t, DIM))?)
    }

    /// Teacher-forced logits: inputs `[BOS, y_1..y_K]`, output `(B, K+1, M+1)`.
    pub fn teacher_logits(&self, images: &Tensor, labels: &[Vec<u32>]) -> Result<Tensor> {
        let b = labels.len();
        let t = labels.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut tok = vec![0u32; b * t];
        for (i, seq) in labels.iter().enumerate() {
            tok[i * t] = self.bos();
            for (j, &y) in seq.iter().enumerate() {
                tok[i * t + j + 1] = y;
            }
            // Right-pad short sequences with BOS embeddings; their logits
            // are masked out of the loss.
            for j in seq.len() + 1..t {
                tok[i * t + j] = self.bos();
            }
        }
        let tokens = Tensor::from_vec(tok, (b, t), images.device())?;
        let memory = self.encoder.forward(images)?;
        let h = self.decoder.forward(&self.embed_tokens(&tokens)?, &memory)?;
        self.out.forward(&h)
    }

    /// Greedy autoregressive decode of one preprocessed line.
    pub fn decode(&self, image: &Tensor) -> Result<DecodedSequence> {
        let memory = self.encoder.forward(image)?;
        let mut tokens = vec![self.bos()];
        let mut labels = Vec::new();
        let mut stop_reason = StopReason::MaxLength;
        for _ in 0..MAX_TEXT_LEN {
            let t = tokens.len();
            let tok = Tensor::from_vec(tokens.clone(), (1, t), image.device())?;
            let h = self.decoder.forward(&self.embed_tokens(&tok)?, &memory)?;
            let logits = self.out.forward(&h.narrow(1, t - 1, 1)?)?;
            let next = logits.flatten_all()?.argmax(0)?.to_scalar::<u32>()?;
            if next == self.eos() {
                stop_reason = StopReason::EndToken;
                break;
            }
            labels.push(next);
            tokens.push(next);
        }
        Ok(DecodedSequence { labels, centers_norm: vec![], stop_reason, sorted_warning: false })
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>, opt: Option<&Adam>) -> Result<()> {
        save_head(&self.store, "ocr-cls", &self.charset_hash, path, meta, opt)
    }

    pub fn load(path: &Path, charset: &CharsetTable) -> Result<Self> {
        let tensors = load_head(path, "ocr-cls", charset)?;
        let model = Self::new(charset, 0)?;
        let n = model.store.entries().len();
        if model.store.load_from(&tensors)? != n {
            return Err(Error::Checkpoint("classifier checkpoint incomplete".into()));
        }
        Ok(model)
    }
}

/// Transformer head regressing per-character center locations.
pub struct LocationPredictor {
    pub store: ParamStore,
    encoder: LineEncoder,
    decoder: SeqDecoder,
    bos_embed: candle_core::Var,
    in_proj: Linear,
    center_out: Linear,
    stop_out: Linear,
    pub charset_hash: String,
}

impl LocationPredictor {
    pub fn new(charset: &CharsetTable, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed.wrapping_add(1));
        let root = store.root();
        let encoder = LineEncoder::new(&root.sub("backbone"))?;
        let decoder = SeqDecoder::new(&root.sub("decoder"))?;
        let bos_embed = store.param("bos", &[DIM], Init::Normal { std: 0.02 })?;
        let in_proj = Linear::new(&root.sub("in_proj"), 1, DIM, true)?;
        let center_out = Linear::new(&root.sub("center_out"), DIM, 1, true)?;
        let stop_out = Linear::new(&root.sub("stop_out"), DIM, 2, true)?;
        Ok(Self {
            store,
            encoder,
            decoder,
            bos_embed,
            in_proj,
            center_out,
            stop_out,
            charset_hash: charset.hash().to_string(),
        })
    }

    fn embed_centers(&self, prev: &[Vec<f32>], t: usize, device: &Device) -> Result<Tensor> {
        let b = prev.len();
        let mut vals = vec![0.0f32; b * t];
        let mut is_bos = vec![1.0f32; b * t];
        for (i, seq) in prev.iter().enumerate() {
            for (j, &c) in seq.iter().enumerate() {
                vals[i * t + j + 1] = c;
                is_bos[i * t + j + 1] = 0.0;
            }
        }
        let vals = Tensor::from_vec(vals, (b, t, 1), device)?;
        let gate = Tensor::from_vec(is_bos, (b, t, 1), device)?;
        let emb = self.in_proj.forward(&vals)?;
        let bos = self.bos_embed.as_tensor().reshape((1, 1, DIM))?;
        // BOS positions use the learned start embedding instead.
        Ok(emb.broadcast_mul(&(1.0 - &gate)?)?.broadcast_add(&bos.broadcast_mul(&gate)?)?)
    }

    /// Teacher-forced outputs: `(centers (B, K+1), stop_logits (B, K+1, 2))`.
    pub fn teacher_outputs(
        &self,
        images: &Tensor,
        centers: &[Vec<f32>],
    ) -> Result<(Tensor, Tensor)> {
        let t = centers.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let memory = self.encoder.forward(images)?;
        let emb = self.embed_centers(centers, t, images.device())?;
        let h = self.decoder.forward(&emb, &memory)?;
        let c = candle_nn::ops::sigmoid(&self.center_out.forward(&h)?)?.squeeze(2)?;
        let s = self.stop_out.forward(&h)?;
        Ok((c, s))
    }

    /// Greedy decode; raw non-monotone outputs are sorted with a warning
    /// flag set.
    pub fn decode(&self, image: &Tensor) -> Result<DecodedSequence> {
        let memory = self.encoder.forward(image)?;
        let mut centers: Vec<f32> = Vec::new();
        let mut stop_reason = StopReason::MaxLength;
        for step in 0..=MAX_TEXT_LEN {
            let t = centers.len() + 1;
            let emb = self.embed_centers(std::slice::from_ref(&centers), t, image.device())?;
            let h = self.decoder.forward(&emb, &memory)?;
            let last = h.narrow(1, t - 1, 1)?;
            let stop = self.stop_out.forward(&last)?.flatten_all()?.argmax(0)?.to_scalar::<u32>()?;
            if stop == 1 {
                stop_reason = StopReason::EndToken;
                break;
            }
            if step == MAX_TEXT_LEN {
                break;
            }
            let c = candle_nn::ops::sigmoid(&self.center_out.forward(&last)?)?
                .flatten_all()?
                .to_vec1::<f32>()?[0];
            centers.push(c);
        }
        let mut sorted_warning = false;
        if centers.windows(2).any(|w| w[1] <= w[0]) {
            centers.sort_by(|a, b| a.partial_cmp(b).expect("finite centers"));
            sorted_warning = true;
        }
        Ok(DecodedSequence { labels: vec![], centers_norm: centers, stop_reason, sorted_warning })
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>, opt: Option<&Adam>) -> Result<()> {
        save_head(&self.store, "ocr-loc", &self.charset_hash, path, meta, opt)
    }

    pub fn load(path: &Path, charset: &CharsetTable) -> Result<Self> {
        let tensors = load_head(path, "ocr-loc", charset)?;
        let model = Self::new(charset, 0)?;
        let n = model.store.entries().len();
        if model.store.load_from(&tensors)? != n {
            return Err(Error::Checkpoint("locator checkpoint incomplete".into()));
        }
        Ok(model)
    }
}

fn save_head(
    store: &ParamStore,
    stage: &str,
    charset_hash: &str,
    path: &Path,
    extra: &BTreeMap<String, String>,
    opt: Option<&Adam>,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> =
        store.entries().into_iter().map(|(n, v)| (n, v.as_tensor().clone())).collect();
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), stage.to_string());
    meta.insert("charset_hash".to_string(), charset_hash.to_string());
    for (k, v) in extra {
        meta.insert(k.clone(), v.clone());
    }
    if let Some(opt) = opt {
        entries.extend(opt.state_entries("main"));
        meta.insert("opt.main.step".to_string(), opt.step_count().to_string());
    }
    save_safetensors(&entries, &meta, path)
}

fn load_head(
    path: &Path,
    stage: &str,
    charset: &CharsetTable,
) -> Result<std::collections::HashMap<String, Tensor>> {
    let (tensors, meta) = load_safetensors(path)?;
    match meta.get("stage").map(String::as_str) {
        Some(s) if s == stage => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "expected {stage} checkpoint, found {other:?}"
            )))
        }
    }
    let hash = meta
        .get("charset_hash")
        .ok_or_else(|| Error::Checkpoint("checkpoint missing charset hash".into()))?;
    charset.check_hash(hash, stage)?;
    Ok(tensors)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OcrTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of blank (background-only, empty-target) training images.
    pub blank_prob: f32,
}

impl Default for OcrTrainConfig {
    fn default() -> Self {
        Self { batch_size: 48, lr: 2e-4, epochs: 40, seed: 0, blank_prob: 0.02 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OcrTrainLog {
    pub loss: Vec<f64>,
    /// Teacher-forced token accuracy (classifier) or center L1 (locator),
    /// evaluated on the training set per epoch.
    pub epoch_metric: Vec<f64>,
}

/// One preprocessed training item.
struct OcrItem {
    image: Vec<f32>,
    labels: Vec<u32>,
    centers_norm: Vec<f32>,
}

fn prepare_items(samples: &[TextSample], blank_prob: f32, seed: u64) -> Result<Vec<OcrItem>> {
    use rayon::prelude::*;
    let mut items: Vec<OcrItem> = samples
        .par_iter()
        .map(|s| -> Result<OcrItem> {
            let lr = s
                .lr
                .as_ref()
                .ok_or_else(|| Error::Dataset("sample has no LR image; run degrade first".into()))?;
            let img = preprocess(lr);
            Ok(OcrItem {
                image: img.data().to_vec(),
                labels: s.labels.clone(),
                centers_norm: norm_centers(&s.centers, s.valid_width),
            })
        })
        .collect::<Result<_>>()?;
    // Blank augmentation: all-background images with empty targets teach
    // the decoders to emit the end token immediately.
    let n_blank = ((samples.len() as f32) * blank_prob).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::derive_seed(seed, 0xB1A2));
    for _ in 0..n_blank {
        let img = if rng.gen_bool(0.5) {
            RgbImage::new(INPUT_H, INPUT_W)
        } else {
            RgbImage::filled(
                INPUT_H,
                INPUT_W,
                [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            )
        };
        items.push(OcrItem { image: img.data().to_vec(), labels: vec![], centers_norm: vec![] });
    }
    Ok(items)
}

fn batch_images(items: &[&OcrItem], device: &Device) -> Result<Tensor> {
    let b = items.len();
    let mut data = Vec::with_capacity(b * 3 * INPUT_H * INPUT_W);
    for item in items {
        data.extend_from_slice(&item.image);
    }
    Ok(Tensor::from_vec(data, (b, 3, INPUT_H, INPUT_W), device)?)
}

/// Teacher-forced cross-entropy over classes + end token, averaged over
/// real (non-padding) positions.
pub fn classifier_loss(model: &CharClassifier, images: &Tensor, labels: &[Vec<u32>]) -> Result<Tensor> {
    let logits = model.teacher_logits(images, labels)?; // (B, T, M+1)
    let (b, t, classes) = logits.dims3()?;
    let mut targets = vec![0u32; b * t];
    let mut mask = vec![0.0f32; b * t];
    for (i, seq) in labels.iter().enumerate() {
        for (j, &y) in seq.iter().enumerate() {
            targets[i * t + j] = y;
            mask[i * t + j] = 1.0;
        }
        targets[i * t + seq.len()] = model.eos();
        mask[i * t + seq.len()] = 1.0;
    }
    let targets = Tensor::from_vec(targets, b * t, images.device())?;
    let mask = Tensor::from_vec(mask, b * t, images.device())?;
    let logp = candle_nn::ops::log_softmax(&logits.reshape((b * t, classes))?, 1)?;
    let picked = logp.gather(&targets.reshape((b * t, 1))?, 1)?.squeeze(1)?;
    let total = (picked.neg()? * &mask)?.sum_all()?;
    Ok((total / mask.sum_all()?)?)
}

/// Teacher-forced locator loss: masked L1 on centers + stop cross-entropy.
pub fn locator_loss(
    model: &LocationPredictor,
    images: &Tensor,
    centers: &[Vec<f32>],
) -> Result<(Tensor, Tensor)> {
    let (pred_c, stop_logits) = model.teacher_outputs(images, centers)?;
    let (b, t) = pred_c.dims2()?;
    let mut target_c = vec![0.0f32; b * t];
    let mut mask = vec![0.0f32; b * t];
    let mut stop_t = vec![0u32; b * t];
    let mut stop_mask = vec![0.0f32; b * t];
    for (i, seq) in centers.iter().enumerate() {
        for (j, &c) in seq.iter().enumerate() {
            target_c[i * t + j] = c;
            mask[i * t + j] = 1.0;
            stop_t[i * t + j] = 0;
            stop_mask[i * t + j] = 1.0;
        }
        stop_t[i * t + seq.len()] = 1;
        stop_mask[i * t + seq.len()] = 1.0;
    }
    let device = images.device();
    let target_c = Tensor::from_vec(target_c, (b, t), device)?;
    let mask_t = Tensor::from_vec(mask.clone(), (b, t), device)?;
    let l1 = ((pred_c - target_c)?.abs()? * &mask_t)?.sum_all()?;
    let denom = mask_t.sum_all()?.clamp(1.0, f64::INFINITY)?;
    let l1 = (l1 / denom)?;

    let stop_t = Tensor::from_vec(stop_t, b * t, device)?;
    let stop_mask = Tensor::from_vec(stop_mask, b * t, device)?;
    let logp = candle_nn::ops::log_softmax(&stop_logits.reshape((b * t, 2))?, 1)?;
    let picked = logp.gather(&stop_t.reshape((b * t, 1))?, 1)?.squeeze(1)?;
    let ce = ((picked.neg()? * &stop_mask)?.sum_all()? / stop_mask.sum_all()?)?;
    Ok((l1, ce))
}

pub enum OcrHead {
    Classifier(CharClassifier),
    Locator(LocationPredictor),
}

/// Train one head. The two heads share no trained parameters; each call
/// builds its own backbone.
pub fn train_ocr(
    samples: &[TextSample],
    charset: &CharsetTable,
    task: OcrTask,
    cfg: &OcrTrainConfig,
    out_dir: &Path,
) -> Result<(OcrHead, OcrTrainLog)> {
    std::fs::create_dir_all(out_dir)?;
    let items = prepare_items(samples, cfg.blank_prob, cfg.seed)?;
    if items.is_empty() {
        return Err(Error::invalid("empty recognition training set"));
    }
    let head = match task {
        OcrTask::Classifier => OcrHead::Classifier(CharClassifier::new(charset, cfg.seed)?),
        OcrTask::Locator => OcrHead::Locator(LocationPredictor::new(charset, cfg.seed)?),
    };
    let (store, device) = match &head {
        OcrHead::Classifier(m) => (&m.store, m.store.device().clone()),
        OcrHead::Locator(m) => (&m.store, m.store.device().clone()),
    };
    let params = store.entries();
    let mut adam = Adam::standard(cfg.lr);
    let mut plateau = PlateauDecay::new(50);
    let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::derive_seed(cfg.seed, 0x0C12));
    let mut log = OcrTrainLog::default();

    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&OcrItem> = chunk.iter().map(|&i| &items[i]).collect();
            let images = batch_images(&batch, &device)?;
            let loss = match &head {
                OcrHead::Classifier(m) => {
                    let labels: Vec<Vec<u32>> = batch.iter().map(|i| i.labels.clone()).collect();
                    classifier_loss(m, &images, &labels)?
                }
                OcrHead::Locator(m) => {
                    let centers: Vec<Vec<f32>> =
                        batch.iter().map(|i| i.centers_norm.clone()).collect();
                    let (l1, ce) = locator_loss(m, &images, &centers)?;
                    (l1 + (ce * 0.2)?)?
                }
            };
            let val = loss.to_scalar::<f32>()? as f64;
            if !val.is_finite() {
                return Err(Error::Diverged { step: log.loss.len(), what: "ocr loss".into() });
            }
            let grads = loss.backward()?;
            adam.step(&params, &grads)?;
            log.loss.push(val);
            let mut lr = adam.lr;
            if plateau.observe(val, &mut lr).is_some() {
                adam.lr = lr;
            }
        }

        let metric = match &head {
            OcrHead::Classifier(m) => teacher_token_accuracy(m, &items, &device)?,
            OcrHead::Locator(m) => teacher_center_l1(m, &items, &device)?,
        };
        log.epoch_metric.push(metric);
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), crate::config::to_canonical_toml(cfg)?);
        meta.insert("epoch".to_string(), (epoch + 1).to_string());
        meta.insert("metric".to_string(), format!("{metric:.5}"));
        let name = format!("{}_epoch{:03}.safetensors", task.stage_name().replace('-', "_"), epoch + 1);
        match &head {
            OcrHead::Classifier(m) => m.save(&out_dir.join(&name), &meta, Some(&adam))?,
            OcrHead::Locator(m) => m.save(&out_dir.join(&name), &meta, Some(&adam))?,
        }
    }

    let final_name = format!("{}.safetensors", task.stage_name().replace('-', "_"));
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), crate::config::to_canonical_toml(cfg)?);
    meta.insert(
        "metric".to_string(),
        format!("{:.5}", log.epoch_metric.last().copied().unwrap_or(f64::NAN)),
    );
    match &head {
        OcrHead::Classifier(m) => m.save(&out_dir.join(&final_name), &meta, Some(&adam))?,
        OcrHead::Locator(m) => m.save(&out_dir.join(&final_name), &meta, Some(&adam))?,
    }
    std::fs::write(
        out_dir.join(format!("{}_train_log.toml", task.stage_name().replace('-', "_"))),
        toml::to_string(&log).map_err(|e| Error::TomlSer(e.to_string()))?,
    )?;
    Ok((head, log))
}

fn teacher_token_accuracy(
    model: &CharClassifier,
    items: &[OcrItem],
    device: &Device,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in items.chunks(48) {
        let refs: Vec<&OcrItem> = chunk.iter().collect();
        let images = batch_images(&refs, device)?;
        let labels: Vec<Vec<u32>> = chunk.iter().map(|i| i.labels.clone()).collect();
        let logits = model.teacher_logits(&images, &labels)?;
        let (_b, t, _) = logits.dims3()?;
        let pred = logits.argmax(2)?.to_vec2::<u32>()?;
        for (i, seq) in labels.iter().enumerate() {
            for (j, &y) in seq.iter().enumerate() {
                if j < t && pred[i][j] == y {
                    hits += 1;
                }
                total += 1;
            }
            if seq.len() < t {
                if pred[i][seq.len()] == model.eos() {
                    hits += 1;
                }
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

fn teacher_center_l1(
    model: &LocationPredictor,
    items: &[OcrItem],
    device: &Device,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in items.chunks(48) {
        let refs: Vec<&OcrItem> = chunk.iter().collect();
        let images = batch_images(&refs, device)?;
        let centers: Vec<Vec<f32>> = chunk.iter().map(|i| i.centers_norm.clone()).collect();
        let (pred, _) = model.teacher_outputs(&images, &centers)?;
        let pred = pred.to_vec2::<f32>()?;
        for (i, seq) in centers.iter().enumerate() {
            for (j, &c) in seq.iter().enumerate() {
                total += (pred[i][j] - c).abs() as f64;
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::new(h, w.max(1));
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 17) % 83) as f32 / 82.0;
        }
        img
    }

    #[test]
    fn preprocess_pads_and_squeezes() {
        // 32x128 LR: aspect-preserving, right-padded.
        let lr = tiny_image(128, 32);
        let out = preprocess(&lr);
        assert_eq!((out.height, out.width), (INPUT_H, INPUT_W));
        for y in 0..INPUT_H {
            for x in 128..INPUT_W {
                assert_eq!(out.get(0, y, x), 0.0);
            }
        }
        // 32x600 LR: squeezed to 256.
        let long = tiny_image(600, 32);
        let out = preprocess(&long);
        assert_eq!((out.height, out.width), (INPUT_H, INPUT_W));
        // 64-high LR (x2 scale): height halved.
        let tall = tiny_image(256, 64);
        let out = preprocess(&tall);
        assert_eq!((out.height, out.width), (INPUT_H, INPUT_W));
    }

    #[test]
    fn norm_round_trip_and_translation() {
        let centers = vec![32.0f32, 96.0, 200.5];
        let norm = norm_centers(&centers, 512);
        let seq = DecodedSequence {
            labels: vec![],
            centers_norm: norm.clone(),
            stop_reason: StopReason::EndToken,
            sorted_warning: false,
        };
        let back = seq.denorm_centers(512);
        for (a, b) in centers.iter().zip(&back) {
            assert_eq!(a, b, "denorm(norm(x)) must be exact for power-of-two widths");
        }
        // Shifting content by delta shifts normalized targets by delta/width.
        let delta = 48.0f32;
        let shifted: Vec<f32> = centers.iter().map(|c| c + delta).collect();
        let a = norm_centers(&shifted, 512);
        for (s, o) in a.iter().zip(&norm) {
            assert!((s - o - delta / 512.0).abs() < 1e-7);
        }
    }

    #[test]
    fn teacher_forced_length_matches_gt() {
        let charset = CharsetTable::digits();
        let model = CharClassifier::new(&charset, 3).unwrap();
        let device = model.store.device().clone();
        let img = preprocess(&tiny_image(128, 32));
        let images = image_to_input(&img, &device).unwrap();
        let labels = vec![vec![1u32, 2, 3, 4, 5]];
        let logits = model.teacher_logits(&images, &labels).unwrap();
        assert_eq!(logits.dims(), &[1, 6, 11]); // K+1 steps, M+1 classes
    }

    #[test]
    fn decode_never_exceeds_max_len() {
        let charset = CharsetTable::digits();
        let cls = CharClassifier::new(&charset, 4).unwrap();
        let loc = LocationPredictor::new(&charset, 4).unwrap();
        let device = cls.store.device().clone();
        let img = preprocess(&tiny_image(200, 32));
        let images = image_to_input(&img, &device).unwrap();
        let d1 = cls.decode(&images).unwrap();
        assert!(d1.labels.len() <= MAX_TEXT_LEN);
        let d2 = loc.decode(&images).unwrap();
        assert!(d2.centers_norm.len() <= MAX_TEXT_LEN);
        // Decoded centers are sorted even from an untrained model.
        for w in d2.centers_norm.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn classifier_loss_matches_independent_cross_entropy() {
        let charset = CharsetTable::digits();
        let model = CharClassifier::new(&charset, 5).unwrap();
        let device = model.store.device().clone();
        let img = preprocess(&tiny_image(96, 32));
        let images = image_to_input(&img, &device).unwrap();
        let labels = vec![vec![7u32, 0, 3]];
        let loss = classifier_loss(&model, &images, &labels).unwrap().to_scalar::<f32>().unwrap();

        // Oracle: explicit f64 softmax cross-entropy over the same logits.
        let logits = model.teacher_logits(&images, &labels).unwrap();
        let raw = logits.to_vec3::<f32>().unwrap();
        let targets = [7usize, 0, 3, 10];
        let mut total = 0.0f64;
        for (j, &t) in targets.iter().enumerate() {
            let row: Vec<f64> = raw[0][j].iter().map(|&v| v as f64).collect();
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let logsum = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += logsum - row[t];
        }
        let oracle = total / targets.len() as f64;
        assert!((loss as f64 - oracle).abs() < 1e-6, "loss={loss} oracle={oracle}");
    }
}
