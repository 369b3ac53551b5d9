//! Synthesis of HR text-line samples with exact ground truth.

pub mod corpus;
pub mod dataset;
pub mod fonts;
pub mod layout;
pub mod render;

pub use corpus::{sample_text, Corpus};
pub use dataset::{read_dataset, write_dataset, Dataset, Manifest};
pub use fonts::{FontSet, SYSTEM_FONT_DIR};
pub use layout::{LayoutKind, LayoutSpec};
pub use render::{pad_width, render_line, render_structure, LayoutChoice, RenderConfig, StructGeometry};

use crate::charset::CharsetTable;
use crate::degrade::ChainLog;
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// One HR/LR text-line pair with per-character ground truth.
#[derive(Debug, Clone)]
pub struct TextSample {
    pub hr: RgbImage,
    pub lr: Option<RgbImage>,
    pub text: String,
    pub labels: Vec<u32>,
    /// Per-character center-x in HR pixels, strictly increasing.
    pub centers: Vec<f32>,
    /// Per-character 128x128 binary structure glyphs.
    pub structures: Vec<GrayImage>,
    pub layout: LayoutSpec,
    pub seed: u64,
    /// Original (pre-padding) HR width.
    pub valid_width: usize,
    /// SR scale factor, set once the LR side exists.
    pub scale: Option<usize>,
    /// Realized degradation chain, set by the degradation stage.
    pub chain: Option<ChainLog>,
    pub font_name: String,
    pub font_px: f32,
    pub char_extent: f32,
}

impl TextSample {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self, charset_len: usize) -> Result<()> {
        let k = self.labels.len();
        if k == 0 || k > crate::MAX_TEXT_LEN {
            return Err(Error::invalid(format!("K={k} outside [1, 16]")));
        }
        if self.centers.len() != k || self.structures.len() != k || self.text.chars().count() != k
        {
            return Err(Error::invalid("labels/centers/structures lengths disagree"));
        }
        for w in self.centers.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!("centers not strictly increasing: {w:?}")));
            }
        }
        for &l in &self.labels {
            if l as usize >= charset_len {
                return Err(Error::invalid(format!("label {l} >= charset size {charset_len}")));
            }
        }
        for s in &self.structures {
            if !s.is_binary() {
                return Err(Error::invalid("structure glyph is not binary"));
            }
            if s.foreground_count() == 0 {
                return Err(Error::invalid("structure glyph has empty foreground"));
            }
        }
        self.layout.validate(k, self.char_extent).map_err(Error::invalid)?;
        Ok(())
    }
}

/// splitmix64, used to derive independent per-sample seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Render one sample, resampling text/layout a few times when a draw is
/// unrenderable (no covering font, degenerate geometry).
pub fn synthesize_sample(
    charset: &CharsetTable,
    corpus: &Corpus,
    fonts: &FontSet,
    cfg: &RenderConfig,
    master_seed: u64,
    index: u64,
) -> Result<TextSample> {
    let mut last_err = None;
    for attempt in 0..8u64 {
        let seed = derive_seed(master_seed, index * achievable_stride() + attempt);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let text = sample_text(corpus, cfg.k_range, charset, &mut rng)?;
        match render_line(charset, &text, fonts, LayoutChoice::SampleAny, cfg, &mut rng, seed) {
            Ok((mut sample, _)) => {
                quantize_to_8bit(&mut sample.hr);
                return Ok(sample);
            }
            Err(e @ (Error::FontCoverage { .. } | Error::Render(_) | Error::InvalidArgument(_))) => {
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Render("sample synthesis failed".into())))
}

const fn achievable_stride() -> u64 {
    // Room for retry sub-seeds without colliding across indices.
    16
}

/// Snap an image to the 8-bit lattice. Samples are 8-bit media on disk;
/// quantizing at creation keeps write/read round-trips lossless.
pub fn quantize_to_8bit(img: &mut RgbImage) {
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Generate `count` samples deterministically (parallel over samples).
pub fn generate_dataset(
    charset: &CharsetTable,
    corpus: &Corpus,
    fonts: &FontSet,
    cfg: &RenderConfig,
    master_seed: u64,
    count: usize,
) -> Result<Vec<TextSample>> {
    if cfg.k_range[0] < 2 {
        return Err(Error::config("dataset k_range must start at 2"));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|i| synthesize_sample(charset, corpus, fonts, cfg, master_seed, i))
        .collect()
}
