//! Text-line layout families: straight baselines, perspective-distorted
//! lines, and sinusoidally curved baselines with per-character rotation.

use crate::geom::Homography;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const MAX_ROTATION_DEG: f32 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Regular,
    Perspective,
    Curved,
}

impl LayoutKind {
    pub fn is_irregular(&self) -> bool {
        !matches!(self, LayoutKind::Regular)
    }
}

/// Realized layout parameters for one rendered line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub kind: LayoutKind,
    /// Per-character rotation in degrees, within `[-45, 45]`.
    pub rotations_deg: Vec<f32>,
    /// Peak baseline offset in pixels (curved only).
    pub curve_amplitude: f32,
    pub curve_wavelength: f32,
    pub curve_phase: f32,
    /// Corner offsets as fractions of the canvas size, order
    /// top-left, top-right, bottom-right, bottom-left (perspective only).
    pub perspective_jitter: [[f32; 2]; 4],
}

impl LayoutSpec {
    pub fn regular(k: usize) -> Self {
        Self {
            kind: LayoutKind::Regular,
            rotations_deg: vec![0.0; k],
            curve_amplitude: 0.0,
            curve_wavelength: 1.0,
            curve_phase: 0.0,
            perspective_jitter: [[0.0; 2]; 4],
        }
    }

    /// Sample a layout for `k` characters.
    ///
    /// `char_extent` is the vertical extent of the rendered text (ascent -
    /// descent) and bounds the curve amplitude: the amplitude never exceeds
    /// two character heights nor what fits on the canvas.
    pub fn sample(
        kind: LayoutKind,
        k: usize,
        canvas_h: f32,
        char_extent: f32,
        max_corner_jitter: f32,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            LayoutKind::Regular => Self::regular(k),
            LayoutKind::Perspective => {
                let mut jitter = [[0.0f32; 2]; 4];
                for corner in &mut jitter {
                    corner[0] = rng.gen_range(-max_corner_jitter..=max_corner_jitter);
                    corner[1] = rng.gen_range(-max_corner_jitter..=max_corner_jitter);
                }
                Self {
                    kind,
                    rotations_deg: vec![0.0; k],
                    curve_amplitude: 0.0,
                    curve_wavelength: 1.0,
                    curve_phase: 0.0,
                    perspective_jitter: jitter,
                }
            }
            LayoutKind::Curved => {
                let rotations = (0..k)
                    .map(|_| rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG))
                    .collect();
                // Rotated glyphs need headroom; cap so the curve plus the
                // rotated glyph box stays on the canvas.
                let slack = ((canvas_h - 1.5 * char_extent) / 2.0).max(0.0);
                let max_amp = (2.0 * char_extent).min(slack);
                let amplitude = if max_amp > 2.0 { rng.gen_range(2.0..=max_amp) } else { max_amp };
                Self {
                    kind,
                    rotations_deg: rotations,
                    curve_amplitude: amplitude,
                    curve_wavelength: rng.gen_range(200.0f32..=900.0),
                    curve_phase: rng.gen_range(0.0f32..std::f32::consts::TAU),
                    perspective_jitter: [[0.0; 2]; 4],
                }
            }
        }
    }

    /// Baseline y-offset of the curve at pre-transform x.
    pub fn curve_offset(&self, x: f32) -> f32 {
        if self.kind != LayoutKind::Curved || self.curve_amplitude == 0.0 {
            return 0.0;
        }
        self.curve_amplitude
            * (std::f32::consts::TAU * x / self.curve_wavelength + self.curve_phase).sin()
    }

    /// Canvas homography for perspective layouts (identity otherwise).
    pub fn homography(&self, canvas_w: f32, canvas_h: f32) -> Homography {
        if self.kind != LayoutKind::Perspective {
            return Homography::identity();
        }
        let src = [
            (0.0, 0.0),
            (canvas_w as f64, 0.0),
            (canvas_w as f64, canvas_h as f64),
            (0.0, canvas_h as f64),
        ];
        let j = &self.perspective_jitter;
        let dx = |f: f32| f as f64 * canvas_w as f64;
        let dy = |f: f32| f as f64 * canvas_h as f64;
        let dst = [
            (dx(j[0][0]), dy(j[0][1])),
            (canvas_w as f64 + dx(j[1][0]), dy(j[1][1])),
            (canvas_w as f64 + dx(j[2][0]), canvas_h as f64 + dy(j[2][1])),
            (dx(j[3][0]), canvas_h as f64 + dy(j[3][1])),
        ];
        Homography::from_quad(&src, &dst).unwrap_or_else(Homography::identity)
    }

    pub fn validate(&self, k: usize, char_extent: f32) -> Result<(), String> {
        if self.rotations_deg.len() != k {
            return Err(format!("rotations len {} != K {k}", self.rotations_deg.len()));
        }
        for &r in &self.rotations_deg {
            if !(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).contains(&r) {
                return Err(format!("rotation {r} out of [-45, 45]"));
            }
        }
        if self.curve_amplitude < 0.0 || self.curve_amplitude > 2.0 * char_extent {
            return Err(format!(
                "curve amplitude {} exceeds 2 x char extent {char_extent}",
                self.curve_amplitude
            ));
        }
        Ok(())
    }
}

/// Which layout family to draw, with probabilities from the render config.
pub fn pick_kind(p_perspective: f32, p_curved: f32, rng: &mut impl Rng) -> LayoutKind {
    let u: f32 = rng.gen_range(0.0..1.0);
    if u < p_perspective {
        LayoutKind::Perspective
    } else if u < p_perspective + p_curved {
        LayoutKind::Curved
    } else {
        LayoutKind::Regular
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn curved_layout_respects_bounds() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let spec = LayoutSpec::sample(LayoutKind::Curved, 8, 128.0, 50.0, 0.1, &mut rng);
            spec.validate(8, 50.0).unwrap();
            assert!(spec.curve_amplitude <= 100.0);
        }
    }

    #[test]
    fn perspective_homography_stays_close_to_identity_for_zero_jitter() {
        let spec = LayoutSpec {
            kind: LayoutKind::Perspective,
            rotations_deg: vec![0.0; 4],
            curve_amplitude: 0.0,
            curve_wavelength: 1.0,
            curve_phase: 0.0,
            perspective_jitter: [[0.0; 2]; 4],
        };
        let h = spec.homography(512.0, 128.0);
        let (x, y) = h.apply(100.0, 60.0);
        assert!((x - 100.0).abs() < 1e-6 && (y - 60.0).abs() < 1e-6);
    }
}
