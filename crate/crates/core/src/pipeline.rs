//! Orchestration: staged training, bundle persistence, and the end-to-end
//! inference path (locate -> classify -> invert style -> generate prior ->
//! super-resolve), plus the interpolation/disentanglement visualizations.

use crate::charset::CharsetTable;
use crate::degrade::bicubic_up;
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::ocr::{self, CharClassifier, LocationPredictor, OcrTask, OcrTrainConfig};
use crate::priorgen::{PriorModel, PriorTrainConfig};
use crate::srnet::{self, SrNet, SrTrainConfig};
use crate::styleenc::{file_hash, StyleEncoder, StyleTrainConfig};
use crate::synth::{read_dataset, FontSet};

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prior,
    OcrCls,
    OcrLoc,
    Style,
    Sr,
}

/// Declarative per-stage run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageRunConfig {
    pub stage: Stage,
    pub out_dir: PathBuf,
    /// Line dataset (required by the ocr/style/sr stages).
    pub data_dir: Option<PathBuf>,
    pub charset: Option<PathBuf>,
    pub fonts: Option<PathBuf>,
    pub prior_ckpt: Option<PathBuf>,
    pub style_ckpt: Option<PathBuf>,
    pub ocr_cls_ckpt: Option<PathBuf>,
    pub ocr_loc_ckpt: Option<PathBuf>,
    /// Structure pairs synthesized for the prior stage.
    pub struct_count: usize,
    pub prior_cfg: PriorTrainConfig,
    pub ocr_cfg: OcrTrainConfig,
    pub style_cfg: StyleTrainConfig,
    pub sr_cfg: SrTrainConfig,
}

impl Default for StageRunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Prior,
            out_dir: PathBuf::from("runs/stage"),
            data_dir: None,
            charset: None,
            fonts: None,
            prior_ckpt: None,
            style_ckpt: None,
            ocr_cls_ckpt: None,
            ocr_loc_ckpt: None,
            struct_count: 2000,
            prior_cfg: PriorTrainConfig::default(),
            ocr_cfg: OcrTrainConfig::default(),
            style_cfg: StyleTrainConfig::default(),
            sr_cfg: SrTrainConfig::default(),
        }
    }
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => Err(Error::MissingDependency(format!("{what}: {} does not exist", p.display()))),
        None => Err(Error::MissingDependency(format!("{what} checkpoint/path not provided"))),
    }
}

fn load_charset(cfg: &StageRunConfig) -> Result<CharsetTable> {
    match &cfg.charset {
        Some(path) => CharsetTable::load(path),
        None => Ok(CharsetTable::ascii()),
    }
}

fn load_fonts(cfg: &StageRunConfig) -> Result<FontSet> {
    let dir = cfg.fonts.clone().unwrap_or_else(crate::synth::fonts::default_font_dir);
    FontSet::load_dir(&dir)
}

/// Run one training stage; dependency checks fail with the missing stage
/// named explicitly.
pub fn run_stage(cfg: &StageRunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let charset = load_charset(cfg)?;
    match cfg.stage {
        Stage::Prior => {
            let fonts = load_fonts(cfg)?;
            let data = crate::priorgen::build_structure_dataset(
                &charset,
                &fonts,
                &cfg.prior_cfg.aug,
                cfg.prior_cfg.seed,
                cfg.struct_count,
            )?;
            crate::priorgen::train_prior(&data, &charset, &cfg.prior_cfg, &cfg.out_dir)?;
            Ok(cfg.out_dir.join("prior.safetensors"))
        }
        Stage::OcrCls | Stage::OcrLoc => {
            let data_dir = require(&cfg.data_dir, "line dataset")?;
            let dataset = read_dataset(&data_dir, Some(&charset))?;
            let task = if cfg.stage == Stage::OcrCls { OcrTask::Classifier } else { OcrTask::Locator };
            ocr::train_ocr(&dataset.samples, &charset, task, &cfg.ocr_cfg, &cfg.out_dir)?;
            Ok(cfg.out_dir.join(format!("{}.safetensors", task.stage_name().replace('-', "_"))))
        }
        Stage::Style => {
            let data_dir = require(&cfg.data_dir, "line dataset")?;
            let prior = require(&cfg.prior_ckpt, "prior stage")?;
            let dataset = read_dataset(&data_dir, Some(&charset))?;
            crate::styleenc::train_style(
                &dataset.samples,
                &charset,
                &prior,
                &cfg.style_cfg,
                &cfg.out_dir,
            )?;
            Ok(cfg.out_dir.join("style.safetensors"))
        }
        Stage::Sr => {
            let data_dir = require(&cfg.data_dir, "line dataset")?;
            let prior = require(&cfg.prior_ckpt, "prior stage")?;
            let style = require(&cfg.style_ckpt, "style stage")?;
            let cls = require(&cfg.ocr_cls_ckpt, "ocr-cls stage")?;
            let loc = require(&cfg.ocr_loc_ckpt, "ocr-loc stage")?;
            let dataset = read_dataset(&data_dir, Some(&charset))?;
            let inputs = srnet::SrTrainInputs {
                samples: &dataset.samples,
                charset: &charset,
                prior_path: &prior,
                style_path: &style,
                cls_path: &cls,
                loc_path: &loc,
            };
            srnet::train_sr(&inputs, &cfg.sr_cfg, &cfg.out_dir)?;
            Ok(cfg.out_dir.join("sr.safetensors"))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub charset_hash: String,
    pub files: Vec<(String, String)>,
}

pub const BUNDLE_FILES: [&str; 5] =
    ["prior.safetensors", "style.safetensors", "ocr_cls.safetensors", "ocr_loc.safetensors", "sr.safetensors"];

/// Copy stage checkpoints into a bundle directory and record their hashes.
pub fn assemble_bundle(
    dir: &Path,
    charset: &CharsetTable,
    prior: &Path,
    style: &Path,
    ocr_cls: &Path,
    ocr_loc: &Path,
    sr: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    charset.save(&dir.join("charset.txt"))?;
    let sources = [prior, style, ocr_cls, ocr_loc, sr];
    let mut files = Vec::new();
    for (name, src) in BUNDLE_FILES.iter().zip(sources) {
        std::fs::copy(src, dir.join(name))?;
        files.push((name.to_string(), file_hash(&dir.join(name))?));
    }
    let manifest = BundleManifest { charset_hash: charset.hash().to_string(), files };
    std::fs::write(
        dir.join("bundle.toml"),
        toml::to_string(&manifest).map_err(|e| Error::TomlSer(e.to_string()))?,
    )?;
    Ok(())
}

/// The five checkpoints plus the charset, hash-checked on load.
pub struct ModelBundle {
    pub charset: CharsetTable,
    pub prior: PriorModel,
    pub style: StyleEncoder,
    pub cls: CharClassifier,
    pub loc: LocationPredictor,
    pub sr: SrNet,
    manifest: BundleManifest,
}

pub struct InferOutput {
    pub sr: RgbImage,
    pub labels: Vec<u32>,
    /// HR-pixel centers.
    pub centers: Vec<f32>,
    /// Generated structure images, one per detected character.
    pub structures: Vec<GrayImage>,
    /// Prior placement overlay (green) on the upscaled LR image.
    pub overlay: RgbImage,
    /// True when no characters were detected and the prior-free path ran.
    pub prior_free: bool,
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("bundle.toml");
        let manifest: BundleManifest = toml::from_str(
            &std::fs::read_to_string(&manifest_path)
                .map_err(|e| Error::MissingDependency(format!("{}: {e}", manifest_path.display())))?,
        )
        .map_err(|e| Error::TomlParse { path: manifest_path, message: e.to_string() })?;
        let charset = CharsetTable::load(&dir.join("charset.txt"))?;
        charset.check_hash(&manifest.charset_hash, "bundle manifest")?;
        for (name, expected) in &manifest.files {
            let actual = file_hash(&dir.join(name))?;
            if &actual != expected {
                return Err(Error::Checkpoint(format!(
                    "bundle file {name} hash mismatch: {actual} != {expected}"
                )));
            }
        }
        let prior = PriorModel::load(&dir.join("prior.safetensors"), &charset)?;
        let style = StyleEncoder::load(&dir.join("style.safetensors"), &charset)?;
        let cls = CharClassifier::load(&dir.join("ocr_cls.safetensors"), &charset)?;
        let loc = LocationPredictor::load(&dir.join("ocr_loc.safetensors"), &charset)?;
        let sr = SrNet::load(&dir.join("sr.safetensors"), &charset)?;
        Ok(Self { charset, prior, style, cls, loc, sr, manifest })
    }

    pub fn checkpoint_hashes(&self) -> Vec<(String, String)> {
        self.manifest.files.clone()
    }

    /// Classify any text-line image by resizing it into the recognition
    /// geometry first.
    pub fn classify_image(&self, img: &RgbImage) -> Result<Vec<u32>> {
        let input = ocr::image_to_input(&ocr::preprocess(img), self.cls.store.device())?;
        Ok(self.cls.decode(&input)?.labels)
    }

    /// Full inference path on a (valid-width) LR line.
    pub fn infer(&self, lr: &RgbImage, scale: usize) -> Result<InferOutput> {
        if scale != self.sr.cfg.scale {
            return Err(Error::invalid(format!(
                "bundle was trained at x{}, requested x{scale}",
                self.sr.cfg.scale
            )));
        }
        let valid_width_hr = lr.width * scale;
        let device = self.sr.store.device().clone();
        let input = ocr::image_to_input(&ocr::preprocess(lr), &device)?;
        let mut labels = self.cls.decode(&input)?.labels;
        let mut centers = self.loc.decode(&input)?.denorm_centers(valid_width_hr);
        // Align the two heads on the common prefix when they disagree.
        let k = labels.len().min(centers.len());
        labels.truncate(k);
        centers.truncate(k);
        // Clamp into the valid width and drop collapsed orderings.
        centers = centers
            .into_iter()
            .map(|c| c.clamp(1.0, (valid_width_hr - 1) as f32))
            .collect();
        let mut dedup: Vec<(u32, f32)> = Vec::with_capacity(k);
        for (l, c) in labels.iter().zip(&centers) {
            if dedup.last().map(|(_, pc)| *pc + 1.0 <= *c).unwrap_or(true) {
                dedup.push((*l, *c));
            }
        }
        let labels: Vec<u32> = dedup.iter().map(|(l, _)| *l).collect();
        let centers: Vec<f32> = dedup.iter().map(|(_, c)| *c).collect();

        let lr_t = srnet::image_to_batch(lr, &device)?;
        let bic = bicubic_up(lr, scale);
        let bic_t = srnet::image_to_batch(&bic, &device)?;

        let prior_free = labels.is_empty() || self.sr.cfg.prior_mode == srnet::PriorMode::UnetOnly;
        let (priors, structures) = if prior_free {
            (None, Vec::new())
        } else {
            let (p, _) = srnet::compose_for_line(
                &self.sr,
                &self.prior,
                &self.style,
                lr,
                &labels,
                &centers,
                valid_width_hr,
                valid_width_hr,
            )?;
            let structures = match &p {
                Some(cp) => match &cp.structures {
                    Some(t) => {
                        let mut out = Vec::with_capacity(labels.len());
                        for i in 0..labels.len() {
                            out.push(crate::priorgen::image_tensor_to_gray(&t.narrow(0, i, 1)?)?);
                        }
                        out
                    }
                    None => Vec::new(),
                },
                None => Vec::new(),
            };
            (p, structures)
        };
        let sr_t = self.sr.forward(&lr_t, priors.as_ref(), &bic_t)?;
        let sr_img = srnet::batch_to_image(&sr_t)?;
        let overlay = render_overlay(&bic, &structures, &centers)?;
        Ok(InferOutput { sr: sr_img, labels, centers, structures, overlay, prior_free })
    }

    /// Decode long lines in segments of at most 12 characters (estimated
    /// from `expected_len`), concatenating labels and offset centers.
    pub fn recognize_segmented(
        &self,
        lr: &RgbImage,
        valid_width_hr: usize,
        expected_len: usize,
    ) -> Result<(Vec<u32>, Vec<f32>)> {
        let segments = expected_len.div_ceil(12).max(1);
        let seg_w = lr.width.div_ceil(segments);
        let mut labels = Vec::new();
        let mut centers = Vec::new();
        let device = self.cls.store.device().clone();
        for s in 0..segments {
            let x0 = s * seg_w;
            if x0 >= lr.width {
                break;
            }
            let w = seg_w.min(lr.width - x0);
            let chunk = lr.crop(0, x0, lr.height, w)?;
            let input = ocr::image_to_input(&ocr::preprocess(&chunk), &device)?;
            let l = self.cls.decode(&input)?.labels;
            let c = self
                .loc
                .decode(&input)?
                .denorm_centers(w * valid_width_hr / lr.width);
            let offset = (x0 * valid_width_hr / lr.width) as f32;
            let k = l.len().min(c.len());
            labels.extend_from_slice(&l[..k]);
            centers.extend(c[..k].iter().map(|v| v + offset));
        }
        Ok((labels, centers))
    }
}

/// Green structure-prior placement over the upscaled LR image; pixels
/// outside every character window are untouched.
pub fn render_overlay(
    base: &RgbImage,
    structures: &[GrayImage],
    centers_hr: &[f32],
) -> Result<RgbImage> {
    let mut out = base.clone();
    for (img, &center) in structures.iter().zip(centers_hr) {
        let x0 = center.round() as isize - (crate::STRUCT_SIZE as isize) / 2;
        for y in 0..img.height.min(out.height) {
            for x in 0..img.width {
                let gx = x0 + x as isize;
                if gx < 0 || gx >= out.width as isize {
                    continue;
                }
                if img.get(y, x) >= 0.5 {
                    let gx = gx as usize;
                    let r = out.get(0, y, gx);
                    let b = out.get(2, y, gx);
                    out.set(0, y, gx, r * 0.35);
                    out.set(1, y, gx, 0.85);
                    out.set(2, y, gx, b * 0.35);
                }
            }
        }
    }
    Ok(out)
}

/// Interpolation grid: one row of structure images from `w_a` to `w_b`.
pub fn visualize_interpolation(
    prior: &PriorModel,
    charset: &CharsetTable,
    ch: char,
    w_a: &candle_core::Tensor,
    w_b: &candle_core::Tensor,
    steps: usize,
) -> Result<RgbImage> {
    let label = charset
        .index_of(ch)
        .ok_or_else(|| Error::invalid(format!("character {ch:?} not in charset")))?;
    let frames = prior.interpolate_styles(label, w_a, w_b, steps)?;
    Ok(tile_gray(&frames, steps))
}

/// Disentanglement grid: fixed `w` per row, one column per character code.
pub fn visualize_codes(
    prior: &PriorModel,
    labels: &[u32],
    w: &candle_core::Tensor,
    rows: usize,
) -> Result<RgbImage> {
    let mut frames = Vec::new();
    for r in 0..rows {
        let wr = w.narrow(0, r, 1)?;
        for &l in labels {
            let p = prior.generate_for_labels(&[l], &wr)?;
            frames.push(crate::priorgen::image_tensor_to_gray(&p.image)?);
        }
    }
    Ok(tile_gray(&frames, labels.len()))
}

fn tile_gray(frames: &[GrayImage], cols: usize) -> RgbImage {
    let cols = cols.max(1);
    let rows = frames.len().div_ceil(cols);
    let (fh, fw) = (crate::STRUCT_SIZE, crate::STRUCT_SIZE);
    let pad = 2;
    let mut out = RgbImage::filled(
        rows * (fh + pad) + pad,
        cols * (fw + pad) + pad,
        [0.25, 0.25, 0.3],
    );
    for (i, frame) in frames.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let oy = pad + r * (fh + pad);
        let ox = pad + c * (fw + pad);
        for y in 0..frame.height.min(fh) {
            for x in 0..frame.width.min(fw) {
                let v = frame.get(y, x);
                for ch in 0..3 {
                    out.set(ch, oy + y, ox + x, v);
                }
            }
        }
    }
    out
}

/// End-to-end smoke constant: inference output width must equal input
/// width times the scale.
pub fn expected_sr_width(lr_width: usize, scale: usize) -> usize {
    lr_width * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::HR_HEIGHT;

    #[test]
    fn stage_dependencies_are_named() {
        let cfg = StageRunConfig {
            stage: Stage::Sr,
            out_dir: std::env::temp_dir().join("textsr_stage_test"),
            data_dir: Some(PathBuf::from("/nonexistent")),
            ..Default::default()
        };
        let err = run_stage(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line dataset"), "unexpected error: {msg}");

        let cfg2 = StageRunConfig { stage: Stage::Style, ..cfg };
        let err2 = run_stage(&cfg2).unwrap_err();
        assert!(err2.to_string().contains("line dataset"), "{err2}");
    }

    #[test]
    fn overlay_only_marks_character_windows() {
        let base = RgbImage::filled(HR_HEIGHT, 256, [0.5, 0.2, 0.5]);
        let mut s = GrayImage::new(crate::STRUCT_SIZE, crate::STRUCT_SIZE);
        for y in 40..88 {
            for x in 40..88 {
                s.set(y, x, 1.0);
            }
        }
        let overlay = render_overlay(&base, &[s], &[64.0]).unwrap();
        for y in 0..HR_HEIGHT {
            for x in 0..256 {
                let changed = overlay.get(1, y, x) != 0.2;
                let in_window = (0..128).contains(&(x as isize)) && (40..88).contains(&y) && (40..88).contains(&x);
                if changed {
                    assert!(in_window, "pixel ({y},{x}) changed outside its window");
                }
            }
        }
    }

    #[test]
    fn expected_width_arithmetic() {
        assert_eq!(expected_sr_width(128, 4), 512);
        assert_eq!(expected_sr_width(256, 2), 512);
    }
}
