//! Font loading and glyph rasterization on top of `fontdue`.

use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

pub struct LoadedFont {
    pub name: String,
    pub font: fontdue::Font,
}

/// An ordered set of fonts. Ordering follows the sorted file names so a
/// given (config, seed) always picks the same face.
pub struct FontSet {
    fonts: Vec<LoadedFont>,
}

/// Rasterized glyph coverage plus the placement metrics used for layout.
#[derive(Debug, Clone)]
pub struct Glyph {
    pub width: usize,
    pub height: usize,
    /// Left bitmap edge relative to the pen position.
    pub xmin: f32,
    /// Bottom bitmap edge relative to the baseline (y up).
    pub ymin: f32,
    pub advance: f32,
    /// Coverage in `[0, 1]`, row-major, top row first.
    pub coverage: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerticalMetrics {
    pub ascent: f32,
    /// Negative (below the baseline).
    pub descent: f32,
}

impl FontSet {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                    Some(ref ext) if ext == "ttf" || ext == "otf"
                )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Render(format!("no .ttf/.otf fonts in {}", dir.display())));
        }
        let mut fonts = Vec::with_capacity(paths.len());
        for path in paths {
            let bytes = std::fs::read(&path)?;
            let font = fontdue::Font::from_bytes(bytes, fontdue::FontSettings::default())
                .map_err(|e| Error::Render(format!("{}: {e}", path.display())))?;
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("font")
                .to_string();
            fonts.push(LoadedFont { name, font });
        }
        Ok(Self { fonts })
    }

    pub fn from_fonts(fonts: Vec<LoadedFont>) -> Result<Self> {
        if fonts.is_empty() {
            return Err(Error::Render("empty font set".into()));
        }
        Ok(Self { fonts })
    }

    pub fn len(&self) -> usize {
        self.fonts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fonts.is_empty()
    }

    pub fn get(&self, idx: usize) -> &LoadedFont {
        &self.fonts[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.fonts[idx].name
    }

    pub fn covers(&self, idx: usize, text: &str) -> bool {
        let font = &self.fonts[idx].font;
        text.chars().all(|ch| font.lookup_glyph_index(ch) != 0)
    }

    /// Indices of fonts covering every character of `text`.
    pub fn covering(&self, text: &str) -> Vec<usize> {
        (0..self.fonts.len()).filter(|&i| self.covers(i, text)).collect()
    }

    pub fn uncovered_chars(&self, text: &str) -> Vec<char> {
        let mut missing: Vec<char> = text
            .chars()
            .filter(|&ch| !self.fonts.iter().any(|f| f.font.lookup_glyph_index(ch) != 0))
            .collect();
        missing.dedup();
        missing
    }

    pub fn rasterize(&self, idx: usize, ch: char, px: f32) -> Result<Glyph> {
        let font = &self.fonts[idx].font;
        if font.lookup_glyph_index(ch) == 0 {
            return Err(Error::Render(format!(
                "font {:?} has no glyph for {ch:?}",
                self.fonts[idx].name
            )));
        }
        let (metrics, bitmap) = font.rasterize(ch, px);
        let coverage = bitmap.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Glyph {
            width: metrics.width,
            height: metrics.height,
            xmin: metrics.xmin as f32,
            ymin: metrics.ymin as f32,
            advance: metrics.advance_width,
            coverage,
        })
    }

    pub fn vertical_metrics(&self, idx: usize, px: f32) -> VerticalMetrics {
        match self.fonts[idx].font.horizontal_line_metrics(px) {
            Some(m) => VerticalMetrics { ascent: m.ascent, descent: m.descent },
            // Degenerate fallback: assume the em square.
            None => VerticalMetrics { ascent: px * 0.8, descent: -px * 0.2 },
        }
    }
}

/// System DejaVu faces, used by the desk-scale configs and tests when the
/// asset root does not provide fonts.
pub const SYSTEM_FONT_DIR: &str = "/usr/share/fonts/truetype/dejavu";

pub fn default_font_dir() -> PathBuf {
    if let Ok(root) = std::env::var(crate::ASSET_ROOT_ENV) {
        let candidate = Path::new(&root).join("fonts");
        if candidate.is_dir() {
            return candidate;
        }
    }
    PathBuf::from(SYSTEM_FONT_DIR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_system_fonts_and_rasterizes() {
        let fonts = FontSet::load_dir(Path::new(SYSTEM_FONT_DIR)).unwrap();
        assert!(fonts.len() >= 3);
        let glyph = fonts.rasterize(0, '8', 64.0).unwrap();
        assert!(glyph.width > 10 && glyph.height > 20);
        assert!(glyph.coverage.iter().any(|&v| v > 0.9));
        assert!(glyph.advance > 0.0);
    }

    #[test]
    fn coverage_check_reports_missing() {
        let fonts = FontSet::load_dir(Path::new(SYSTEM_FONT_DIR)).unwrap();
        assert!(fonts.covering("042").len() >= 3);
        // DejaVu has no CJK glyphs.
        assert!(fonts.covering("0中").is_empty());
        assert_eq!(fonts.uncovered_chars("0中"), vec!['中']);
    }

    #[test]
    fn rasterization_is_deterministic() {
        let fonts = FontSet::load_dir(Path::new(SYSTEM_FONT_DIR)).unwrap();
        let a = fonts.rasterize(1, 'g', 72.5).unwrap();
        let b = fonts.rasterize(1, 'g', 72.5).unwrap();
        assert_eq!(a.coverage, b.coverage);
        assert_eq!((a.width, a.height, a.xmin as i32, a.ymin as i32), (b.width, b.height, b.xmin as i32, b.ymin as i32));
    }
}
