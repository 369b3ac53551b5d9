//! On-disk dataset format.
//!
//! One directory per dataset: a `manifest.toml` recording the charset, seeds
//! and config hash, plus per-sample lossless PNGs and a structured-text
//! sidecar so the ground truth stays human-inspectable:
//!
//! ```text
//! root/
//!   manifest.toml
//!   samples/000000.hr.png        RGB, height 128
//!   samples/000000.lr.png        present once degraded
//!   samples/000000.s00.png ...   per-character binary structure glyphs
//!   samples/000000.meta.toml     labels, centers, layout, seed, chain
//! ```

use super::TextSample;
use crate::charset::CharsetTable;
use crate::degrade::ChainLog;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synth::layout::LayoutSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.toml";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub master_seed: u64,
    pub charset_hash: String,
    /// Charset characters in index order.
    pub charset: Vec<char>,
    /// Hash of the generating config (canonical TOML), if any.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleMeta {
    text: String,
    labels: Vec<u32>,
    centers: Vec<f32>,
    seed: u64,
    valid_width: usize,
    font_name: String,
    font_px: f32,
    char_extent: f32,
    layout: LayoutSpec,
    scale: Option<usize>,
    chain: Option<ChainLog>,
}

pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<TextSample>,
    pub charset: CharsetTable,
}

fn sample_dir(root: &Path) -> PathBuf {
    root.join("samples")
}

fn id_str(i: usize) -> String {
    format!("{i:06}")
}

pub fn write_dataset(
    samples: &[TextSample],
    root: &Path,
    charset: &CharsetTable,
    master_seed: u64,
    config_hash: Option<String>,
) -> Result<Manifest> {
    let dir = sample_dir(root);
    std::fs::create_dir_all(&dir)?;
    samples
        .par_iter()
        .enumerate()
        .try_for_each(|(i, sample)| -> Result<()> {
            let id = id_str(i);
            sample.hr.save_png(&dir.join(format!("{id}.hr.png")))?;
            if let Some(lr) = &sample.lr {
                lr.save_png(&dir.join(format!("{id}.lr.png")))?;
            }
            for (k, s) in sample.structures.iter().enumerate() {
                s.save_png(&dir.join(format!("{id}.s{k:02}.png")))?;
            }
            let meta = SampleMeta {
                text: sample.text.clone(),
                labels: sample.labels.clone(),
                centers: sample.centers.clone(),
                seed: sample.seed,
                valid_width: sample.valid_width,
                font_name: sample.font_name.clone(),
                font_px: sample.font_px,
                char_extent: sample.char_extent,
                layout: sample.layout.clone(),
                scale: sample.scale,
                chain: sample.chain.clone(),
            };
            let text = toml::to_string(&meta).map_err(|e| Error::TomlSer(e.to_string()))?;
            std::fs::write(dir.join(format!("{id}.meta.toml")), text)?;
            Ok(())
        })?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        count: samples.len(),
        master_seed,
        charset_hash: charset.hash().to_string(),
        charset: charset.chars().to_vec(),
        config_hash,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::TomlSer(e.to_string()))?;
    std::fs::write(root.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::TomlParse { path, message: e.to_string() })
}

/// Load a dataset, verifying the manifest charset against `expected` when
/// given.
pub fn read_dataset(root: &Path, expected: Option<&CharsetTable>) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let charset = CharsetTable::new(manifest.charset.clone())?;
    charset.check_hash(&manifest.charset_hash, "dataset manifest")?;
    if let Some(expected) = expected {
        expected.check_hash(&manifest.charset_hash, "dataset loader")?;
    }
    let dir = sample_dir(root);
    let samples: Vec<TextSample> = (0..manifest.count)
        .into_par_iter()
        .map(|i| read_sample(&dir, i))
        .collect::<Result<_>>()?;
    for s in &samples {
        s.validate(charset.len())?;
    }
    Ok(Dataset { manifest, samples, charset })
}

fn read_sample(dir: &Path, i: usize) -> Result<TextSample> {
    let id = id_str(i);
    let meta_path = dir.join(format!("{id}.meta.toml"));
    let meta: SampleMeta = toml::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::TomlParse { path: meta_path, message: e.to_string() })?;
    let hr = crate::image::RgbImage::load_png(&dir.join(format!("{id}.hr.png")))?;
    let lr_path = dir.join(format!("{id}.lr.png"));
    let lr = if lr_path.exists() {
        Some(crate::image::RgbImage::load_png(&lr_path)?)
    } else {
        None
    };
    let structures: Vec<GrayImage> = (0..meta.labels.len())
        .map(|k| {
            let mut s = GrayImage::load_png(&dir.join(format!("{id}.s{k:02}.png")))?;
            // PNG stores 0/255; snap back to exact {0, 1}.
            for v in s.data_mut() {
                *v = if *v >= 0.5 { 1.0 } else { 0.0 };
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(TextSample {
        hr,
        lr,
        text: meta.text,
        labels: meta.labels,
        centers: meta.centers,
        structures,
        layout: meta.layout,
        seed: meta.seed,
        valid_width: meta.valid_width,
        scale: meta.scale,
        chain: meta.chain,
        font_name: meta.font_name,
        font_px: meta.font_px,
        char_extent: meta.char_extent,
    })
}

/// Content checksum over every ground-truth field of a sample.
pub fn sample_checksum(sample: &TextSample) -> String {
    let mut h = Sha256::new();
    for &v in sample.hr.data() {
        h.update(v.to_le_bytes());
    }
    match &sample.lr {
        Some(lr) => {
            h.update([1u8]);
            for &v in lr.data() {
                h.update(v.to_le_bytes());
            }
        }
        None => h.update([0u8]),
    }
    h.update(sample.text.as_bytes());
    for &l in &sample.labels {
        h.update(l.to_le_bytes());
    }
    for &c in &sample.centers {
        h.update(c.to_le_bytes());
    }
    for s in &sample.structures {
        for &v in s.data() {
            h.update([(v >= 0.5) as u8]);
        }
    }
    h.update(toml::to_string(&sample.layout).unwrap_or_default().as_bytes());
    h.update(sample.seed.to_le_bytes());
    h.update(sample.valid_width.to_le_bytes());
    format!("{:x}", h.finalize())
}
