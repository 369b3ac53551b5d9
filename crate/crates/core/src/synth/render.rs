//! HR text-line rendering with exact per-character ground truth.
//!
//! Every character is drawn by warping its rasterized coverage through an
//! affine map (rotation for curved layouts, the local linearization of the
//! canvas homography for perspective layouts). The same warp renders the
//! character's binary structure glyph into its own 128x128 window, so the
//! structure ground truth has exactly the geometry of the HR glyph.

use super::fonts::{FontSet, Glyph};
use super::layout::{pick_kind, LayoutKind, LayoutSpec};
use crate::charset::CharsetTable;
use crate::error::{Error, Result};
use crate::geom::{sample_bilinear, Affine2};
use crate::image::{GrayImage, RgbImage};
use crate::resample::{resize_rgb, Filter};
use crate::synth::TextSample;
use crate::{HR_HEIGHT, STRUCT_SIZE};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Binarization threshold for structure glyphs (fraction of anti-aliased
/// coverage).
pub const STRUCT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Font directory; falls back to the asset root or the system DejaVu dir.
    pub font_dir: Option<PathBuf>,
    /// Optional background image directory; procedural backgrounds otherwise.
    pub background_dir: Option<PathBuf>,
    pub hr_height: usize,
    /// Zero-padding target width for batched SR.
    pub pad_width: usize,
    pub k_range: [usize; 2],
    pub font_px_regular: [f32; 2],
    pub font_px_curved: [f32; 2],
    /// Extra advance between characters, as a fraction of the font size.
    pub tracking_range: [f32; 2],
    pub margin_px: [f32; 2],
    pub p_perspective: f32,
    pub p_curved: f32,
    pub max_corner_jitter: f32,
    /// Background crops are upsampled by a factor in this range.
    pub bg_upsample_range: [f32; 2],
    /// Minimum RGB distance between text color and mean background.
    pub text_color_min_dist: f32,
    /// Force an exact canvas width instead of deriving it from the text.
    pub fixed_width: Option<usize>,
    /// Center the text horizontally instead of jittering the left margin.
    pub centered: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            font_dir: None,
            background_dir: None,
            hr_height: HR_HEIGHT,
            pad_width: crate::DEFAULT_PAD_WIDTH,
            k_range: [2, crate::MAX_TEXT_LEN],
            font_px_regular: [72.0, 112.0],
            font_px_curved: [36.0, 52.0],
            tracking_range: [0.0, 0.12],
            margin_px: [4.0, 16.0],
            p_perspective: 0.25,
            p_curved: 0.25,
            max_corner_jitter: 0.05,
            bg_upsample_range: [4.0, 16.0],
            text_color_min_dist: 0.25,
            fixed_width: None,
            centered: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.bg_upsample_range;
        if !(4.0..=16.0).contains(&lo) || !(4.0..=16.0).contains(&hi) || lo > hi {
            return Err(Error::config(format!("bg_upsample_range [{lo}, {hi}] outside [4, 16]")));
        }
        if self.k_range[0] < 1 || self.k_range[0] > self.k_range[1] {
            return Err(Error::config(format!("bad k_range {:?}", self.k_range)));
        }
        if self.p_perspective + self.p_curved > 1.0 {
            return Err(Error::config("layout probabilities exceed 1"));
        }
        if let Some(w) = self.fixed_width {
            if w % 32 != 0 {
                return Err(Error::config(format!("fixed_width {w} must be a multiple of 32")));
            }
        }
        Ok(())
    }
}

/// Whether to sample a fresh layout or reuse a fixed one (tests).
pub enum LayoutChoice {
    Sample(LayoutKind),
    SampleAny,
    Fixed(LayoutSpec),
}

/// Everything the renderer knows about glyph placement, for geometry oracles.
#[derive(Debug, Clone)]
pub struct RenderReport {
    pub font_index: usize,
    pub font_name: String,
    pub font_px: f32,
    pub char_extent: f32,
    pub pen_x0: f32,
    pub baseline_y: f32,
    pub advances: Vec<f32>,
    /// Final-canvas AABB of each drawn glyph: (x0, y0, x1, y1).
    pub glyph_boxes: Vec<(f32, f32, f32, f32)>,
}

/// Geometry needed to redraw one character's structure glyph.
#[derive(Debug, Clone)]
pub struct StructGeometry {
    pub font_px: f32,
    /// dst <- src linear map (rotation and/or perspective linearization).
    pub linear: [f64; 4],
    /// Where the glyph pivot (advance center, text mid-line) lands inside
    /// the structure window.
    pub pivot_in_window: (f64, f64),
}

impl StructGeometry {
    pub fn centered(font_px: f32) -> Self {
        let c = STRUCT_SIZE as f64 / 2.0;
        Self { font_px, linear: [1.0, 0.0, 0.0, 1.0], pivot_in_window: (c, c) }
    }
}

/// Pivot of a glyph in bitmap coordinates: advance center on x, text
/// mid-line on y.
fn glyph_pivot_bitmap(glyph: &Glyph, ascent: f32, descent: f32) -> (f64, f64) {
    let px = glyph.advance as f64 / 2.0 - glyph.xmin as f64;
    let py = (glyph.ymin + glyph.height as f32) as f64 - ((ascent + descent) / 2.0) as f64;
    (px, py)
}

/// Warp a glyph's coverage into `sink` with `dst = pivot_dst + linear * (src - pivot_src)`.
/// `sink` receives `(x, y, coverage)` for pixels with non-zero coverage.
fn warp_glyph(
    glyph: &Glyph,
    pivot_bm: (f64, f64),
    linear: [f64; 4],
    pivot_dst: (f64, f64),
    bounds: (usize, usize),
    sink: &mut impl FnMut(usize, usize, f32),
) -> (f32, f32, f32, f32) {
    let (out_w, out_h) = bounds;
    let fwd = Affine2 { m: [linear[0], linear[1], 0.0, linear[2], linear[3], 0.0] };
    let inv = fwd.inverse().unwrap_or_else(Affine2::identity);

    // Destination AABB from the transformed bitmap corners.
    let corners = [
        (0.0, 0.0),
        (glyph.width as f64, 0.0),
        (0.0, glyph.height as f64),
        (glyph.width as f64, glyph.height as f64),
    ];
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (cx, cy) in corners {
        let (dx, dy) = fwd.apply(cx - pivot_bm.0, cy - pivot_bm.1);
        let (dx, dy) = (dx + pivot_dst.0, dy + pivot_dst.1);
        x0 = x0.min(dx);
        y0 = y0.min(dy);
        x1 = x1.max(dx);
        y1 = y1.max(dy);
    }
    let ix0 = (x0.floor().max(0.0)) as usize;
    let iy0 = (y0.floor().max(0.0)) as usize;
    let ix1 = (x1.ceil().min(out_w as f64)) as usize;
    let iy1 = (y1.ceil().min(out_h as f64)) as usize;

    for iy in iy0..iy1 {
        for ix in ix0..ix1 {
            let (sx, sy) =
                inv.apply(ix as f64 + 0.5 - pivot_dst.0, iy as f64 + 0.5 - pivot_dst.1);
            let (sx, sy) = (sx + pivot_bm.0, sy + pivot_bm.1);
            // Bitmap pixel centers sit at integer+0.5.
            let cov =
                sample_bilinear(&glyph.coverage, glyph.height, glyph.width, sx - 0.5, sy - 0.5);
            if cov > 0.0 {
                sink(ix, iy, cov.min(1.0));
            }
        }
    }
    (x0 as f32, y0 as f32, x1 as f32, y1 as f32)
}

/// Render one character's 128x128 binary structure glyph.
pub fn render_structure(
    fonts: &FontSet,
    font_index: usize,
    ch: char,
    geometry: &StructGeometry,
) -> Result<GrayImage> {
    let glyph = fonts.rasterize(font_index, ch, geometry.font_px)?;
    let vm = fonts.vertical_metrics(font_index, geometry.font_px);
    let pivot_bm = glyph_pivot_bitmap(&glyph, vm.ascent, vm.descent);
    let mut out = GrayImage::new(STRUCT_SIZE, STRUCT_SIZE);
    {
        let data = out.data_mut();
        warp_glyph(
            &glyph,
            pivot_bm,
            geometry.linear,
            geometry.pivot_in_window,
            (STRUCT_SIZE, STRUCT_SIZE),
            &mut |x, y, cov| {
                let v = &mut data[y * STRUCT_SIZE + x];
                *v = v.max(if cov >= STRUCT_THRESHOLD { 1.0 } else { 0.0 });
            },
        );
    }
    if out.foreground_count() == 0 {
        return Err(Error::Render(format!("empty structure glyph for {ch:?}")));
    }
    Ok(out)
}

fn sample_range(rng: &mut impl Rng, range: [f32; 2]) -> f32 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

fn sample_text_color(bg_mean: [f32; 3], min_dist: f32, rng: &mut impl Rng) -> [f32; 3] {
    for _ in 0..16 {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let d2: f32 = c.iter().zip(&bg_mean).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2.sqrt() >= min_dist {
            return c;
        }
    }
    [1.0 - bg_mean[0], 1.0 - bg_mean[1], 1.0 - bg_mean[2]]
}

/// Paint the line background: an upsampled crop of a source image when a
/// directory is configured, otherwise a procedural smooth field or a solid.
fn render_background(
    h: usize,
    w: usize,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<RgbImage> {
    let upsample = sample_range(rng, cfg.bg_upsample_range) as usize;
    if let Some(dir) = &cfg.background_dir {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                    Some(ref ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
                )
            })
            .collect();
        files.sort();
        if !files.is_empty() {
            let img = RgbImage::load_png(&files[rng.gen_range(0..files.len())])?;
            let (ch, cw) = (h.div_ceil(upsample).max(2), w.div_ceil(upsample).max(2));
            if img.height > ch && img.width > cw {
                let y0 = rng.gen_range(0..=img.height - ch);
                let x0 = rng.gen_range(0..=img.width - cw);
                let crop = img.crop(y0, x0, ch, cw)?;
                return Ok(resize_rgb(&crop, h, w, Filter::CatmullRom));
            }
        }
    }
    if rng.gen_bool(0.3) {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        return Ok(RgbImage::filled(h, w, c));
    }
    // Smooth random field: a coarse random grid upsampled by the factor.
    let (gh, gw) = (h.div_ceil(upsample).max(2), w.div_ceil(upsample).max(2));
    let mut grid = RgbImage::new(gh, gw);
    for v in grid.data_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    Ok(resize_rgb(&grid, h, w, Filter::CatmullRom))
}

fn round_up_32(w: usize) -> usize {
    w.div_ceil(32) * 32
}

/// Render the HR side of one sample: image, labels, strictly increasing
/// center locations, and per-character structure glyphs.
pub fn render_line(
    charset: &CharsetTable,
    text: &str,
    fonts: &FontSet,
    layout: LayoutChoice,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
    seed: u64,
) -> Result<(TextSample, RenderReport)> {
    let chars: Vec<char> = text.chars().collect();
    let k = chars.len();
    if k == 0 {
        return Err(Error::invalid("empty text"));
    }
    let labels = charset.labels_for(text)?;

    let candidates = fonts.covering(text);
    let font_index = *candidates.get(rng.gen_range(0..candidates.len().max(1)) % candidates.len().max(1)).ok_or_else(|| Error::FontCoverage {
        text: text.to_string(),
        missing: fonts.uncovered_chars(text),
    })?;

    // Layout kind first (it constrains the font size), then the realized
    // layout once the text extent is known.
    let kind = match &layout {
        LayoutChoice::Sample(kind) => *kind,
        LayoutChoice::SampleAny => pick_kind(cfg.p_perspective, cfg.p_curved, rng),
        LayoutChoice::Fixed(spec) => spec.kind,
    };
    let px_range = match kind {
        LayoutKind::Curved => cfg.font_px_curved,
        _ => cfg.font_px_regular,
    };
    let mut font_px = sample_range(rng, px_range);

    let h = cfg.hr_height;
    let tracking = sample_range(rng, cfg.tracking_range) * font_px;
    let margin = sample_range(rng, cfg.margin_px);

    // Measure advances, shrinking the font if the line would overflow the
    // padding target.
    let mut glyphs: Vec<Glyph> = Vec::with_capacity(k);
    let mut total_advance: f32;
    loop {
        glyphs.clear();
        total_advance = 0.0;
        for &ch in &chars {
            let g = fonts.rasterize(font_index, ch, font_px)?;
            total_advance += g.advance + tracking;
            glyphs.push(g);
        }
        let max_w = cfg.fixed_width.unwrap_or(cfg.pad_width);
        if (total_advance + 2.0 * margin).ceil() as usize <= max_w {
            break;
        }
        font_px *= 0.9;
        if font_px < 8.0 {
            return Err(Error::Render(format!("text {text:?} cannot fit width {max_w}")));
        }
    }

    let vm = fonts.vertical_metrics(font_index, font_px);
    let char_extent = vm.ascent - vm.descent;
    let width = cfg
        .fixed_width
        .unwrap_or_else(|| round_up_32((total_advance + 2.0 * margin).ceil() as usize));
    let pen_x0 = if cfg.centered || cfg.fixed_width.is_some() {
        (width as f32 - total_advance) / 2.0
    } else {
        margin
    };
    // Vertical center of the text block.
    let baseline_y = h as f32 / 2.0 + (vm.ascent + vm.descent) / 2.0;
    let mid_y = baseline_y - (vm.ascent + vm.descent) / 2.0;

    let spec = match layout {
        LayoutChoice::Fixed(spec) => spec,
        _ => LayoutSpec::sample(kind, k, h as f32, char_extent, cfg.max_corner_jitter, rng),
    };
    spec.validate(k, char_extent).map_err(Error::Render)?;

    let mut hr = render_background(h, width, cfg, rng)?;
    let bg_mean = [
        hr.plane(0).iter().sum::<f32>() / (h * width) as f32,
        hr.plane(1).iter().sum::<f32>() / (h * width) as f32,
        hr.plane(2).iter().sum::<f32>() / (h * width) as f32,
    ];
    let color = sample_text_color(bg_mean, cfg.text_color_min_dist, rng);

    let homography = spec.homography(width as f32, h as f32);
    let mut centers = Vec::with_capacity(k);
    let mut structures = Vec::with_capacity(k);
    let mut advances = Vec::with_capacity(k);
    let mut boxes = Vec::with_capacity(k);

    let mut pen = pen_x0;
    for (i, glyph) in glyphs.iter().enumerate() {
        let advance = glyph.advance + tracking;
        let pre_x = pen + advance / 2.0;
        let pre_y = mid_y + spec.curve_offset(pre_x);
        pen += advance;
        advances.push(advance);

        // Final pivot position and local linear map.
        let (fx, fy) = homography.apply(pre_x as f64, pre_y as f64);
        let jac = homography.jacobian(pre_x as f64, pre_y as f64);
        let rot = Affine2::rotation_deg(spec.rotations_deg[i] as f64);
        let linear = [
            jac[0] * rot.m[0] + jac[1] * rot.m[3],
            jac[0] * rot.m[1] + jac[1] * rot.m[4],
            jac[2] * rot.m[0] + jac[3] * rot.m[3],
            jac[2] * rot.m[1] + jac[3] * rot.m[4],
        ];

        let pivot_bm = glyph_pivot_bitmap(glyph, vm.ascent, vm.descent);
        {
            let hh = hr.height;
            let ww = hr.width;
            let planes = hr.data_mut();
            let hw = hh * ww;
            let bbox = warp_glyph(
                glyph,
                pivot_bm,
                linear,
                (fx, fy),
                (ww, hh),
                &mut |x, y, cov| {
                    let idx = y * ww + x;
                    for c in 0..3 {
                        let v = &mut planes[c * hw + idx];
                        *v = *v * (1.0 - cov) + color[c] * cov;
                    }
                },
            );
            boxes.push(bbox);
        }

        // Structure glyph: same geometry, re-centered into its own window.
        let window_x = (fx as f32).round() - (STRUCT_SIZE as f32) / 2.0;
        let geometry = StructGeometry {
            font_px,
            linear,
            pivot_in_window: (fx - window_x as f64, fy),
        };
        structures.push(render_structure(fonts, font_index, chars[i], &geometry)?);
        centers.push(fx as f32);
    }

    let report = RenderReport {
        font_index,
        font_name: fonts.name(font_index).to_string(),
        font_px,
        char_extent,
        pen_x0,
        baseline_y,
        advances,
        glyph_boxes: boxes,
    };

    let sample = TextSample {
        valid_width: hr.width,
        hr,
        lr: None,
        text: text.to_string(),
        labels,
        centers,
        structures,
        layout: spec,
        seed,
        scale: None,
        chain: None,
        font_name: report.font_name.clone(),
        font_px,
        char_extent,
    };
    sample.validate(charset.len())?;
    Ok((sample, report))
}

/// Zero-pad a sample's HR (and LR, when present) to the target width.
/// Centers are untouched; `valid_width` keeps the original width.
pub fn pad_width(sample: &TextSample, target_width: usize) -> Result<TextSample> {
    let mut out = sample.clone();
    out.hr = sample.hr.pad_right(target_width)?;
    if let Some(lr) = &sample.lr {
        let scale = sample.scale.unwrap_or(1);
        if target_width % scale != 0 {
            return Err(Error::invalid(format!(
                "pad target {target_width} not divisible by scale {scale}"
            )));
        }
        out.lr = Some(lr.pad_right(target_width / scale)?);
    }
    out.valid_width = sample.valid_width;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::fonts::SYSTEM_FONT_DIR;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::path::Path;

    fn fonts() -> FontSet {
        FontSet::load_dir(Path::new(SYSTEM_FONT_DIR)).unwrap()
    }

    #[test]
    fn structure_is_binary_and_deterministic() {
        let fonts = fonts();
        let geom = StructGeometry::centered(80.0);
        let a = render_structure(&fonts, 0, '5', &geom).unwrap();
        let b = render_structure(&fonts, 0, '5', &geom).unwrap();
        assert!(a.is_binary());
        assert!(a.foreground_count() > 100);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn symmetric_glyph_balances_left_right() {
        let fonts = fonts();
        let geom = StructGeometry::centered(96.0);
        let img = render_structure(&fonts, 0, 'O', &geom).unwrap();
        let half = STRUCT_SIZE / 2;
        let mut left = 0usize;
        let mut right = 0usize;
        for y in 0..STRUCT_SIZE {
            for x in 0..STRUCT_SIZE {
                if img.get(y, x) > 0.5 {
                    if x < half {
                        left += 1;
                    } else {
                        right += 1;
                    }
                }
            }
        }
        let total = (left + right) as f32;
        assert!((left as f32 - right as f32).abs() / total < 0.01, "left={left} right={right}");
    }

    #[test]
    fn single_char_on_fixed_width_is_centered() {
        let charset = CharsetTable::digits();
        let fonts = fonts();
        let cfg = RenderConfig {
            fixed_width: Some(128),
            centered: true,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (sample, _) = render_line(
            &charset,
            "7",
            &fonts,
            LayoutChoice::Sample(LayoutKind::Regular),
            &cfg,
            &mut rng,
            11,
        )
        .unwrap();
        assert_eq!(sample.hr.width, 128);
        assert!((sample.centers[0] - 64.0).abs() < 1e-3, "center={}", sample.centers[0]);
    }

    #[test]
    fn regular_centers_follow_pen_advances() {
        let charset = CharsetTable::digits();
        let fonts = fonts();
        // Monospace face only.
        let mono = fonts
            .covering("0123456789")
            .into_iter()
            .find(|&i| fonts.name(i).contains("Mono") && !fonts.name(i).contains("Bold"))
            .unwrap();
        let single = FontSet::from_fonts(vec![super::super::fonts::LoadedFont {
            name: fonts.name(mono).to_string(),
            font: fonts.get(mono).font.clone(),
        }])
        .unwrap();
        let cfg = RenderConfig {
            tracking_range: [0.0, 0.0],
            p_curved: 0.0,
            p_perspective: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (sample, report) = render_line(
            &charset,
            "31415",
            &single,
            LayoutChoice::Sample(LayoutKind::Regular),
            &cfg,
            &mut rng,
            5,
        )
        .unwrap();
        let a = report.advances[0];
        for (i, &c) in sample.centers.iter().enumerate() {
            let expect = report.pen_x0 + a * i as f32 + a / 2.0;
            assert!((c - expect).abs() < 1e-3, "center {i}: {c} vs {expect}");
            // The drawn glyph box must sit inside the advance cell.
            let (x0, _, x1, _) = report.glyph_boxes[i];
            let cell_lo = report.pen_x0 + a * i as f32;
            let cell_hi = cell_lo + a;
            assert!(x0 >= cell_lo - 1.0 && x1 <= cell_hi + 1.0, "box [{x0},{x1}] cell [{cell_lo},{cell_hi}]");
        }
    }

    #[test]
    fn curved_rotations_within_bounds() {
        let charset = CharsetTable::digits();
        let fonts = fonts();
        let cfg = RenderConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let (sample, _) = render_line(
            &charset,
            "2718",
            &fonts,
            LayoutChoice::Sample(LayoutKind::Curved),
            &cfg,
            &mut rng,
            9,
        )
        .unwrap();
        assert_eq!(sample.layout.kind, LayoutKind::Curved);
        for &r in &sample.layout.rotations_deg {
            assert!((-45.0..=45.0).contains(&r));
        }
        assert!(sample.layout.curve_amplitude <= 2.0 * sample.char_extent);
    }

    #[test]
    fn missing_font_coverage_is_an_error() {
        let charset = CharsetTable::new(vec!['0', '中']).unwrap();
        let fonts = fonts();
        let cfg = RenderConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let err = render_line(
            &charset,
            "0中",
            &fonts,
            LayoutChoice::Sample(LayoutKind::Regular),
            &cfg,
            &mut rng,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FontCoverage { .. }), "{err}");
    }

    #[test]
    fn pad_width_zero_fills_and_keeps_mean_ratio() {
        let charset = CharsetTable::digits();
        let fonts = fonts();
        let cfg = RenderConfig { fixed_width: Some(512), centered: true, ..Default::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let (sample, _) = render_line(
            &charset,
            "906090",
            &fonts,
            LayoutChoice::Sample(LayoutKind::Regular),
            &cfg,
            &mut rng,
            2,
        )
        .unwrap();
        let padded = pad_width(&sample, 2048).unwrap();
        assert_eq!(padded.hr.width, 2048);
        assert_eq!(padded.valid_width, 512);
        assert_eq!(padded.centers, sample.centers);
        for c in 0..3 {
            for y in 0..padded.hr.height {
                for x in 512..2048 {
                    assert_eq!(padded.hr.get(c, y, x), 0.0);
                }
            }
        }
        let ratio = padded.hr.mean() / sample.hr.mean();
        assert!((ratio - 512.0 / 2048.0).abs() < 1e-5, "ratio={ratio}");
        // Identity when width already matches.
        let same = pad_width(&sample, 512).unwrap();
        assert_eq!(same.hr, sample.hr);
        // Explicit failure when too wide.
        assert!(pad_width(&sample, 256).is_err());
    }
}
