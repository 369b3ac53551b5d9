//! Separable image resampling.
//!
//! The cubic filter is Catmull-Rom with clamp-to-edge handling. When
//! minifying, the kernel support is stretched by the scale factor so the
//! filter also acts as an anti-aliasing low-pass, which is the convention of
//! mainstream resize implementations. Accumulation is in `f64` and results
//! are stored as `f32`.

use crate::image::{GrayImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Nearest,
    Bilinear,
    CatmullRom,
}

#[inline]
fn catmull_rom(x: f64) -> f64 {
    // a = -0.5
    let x = x.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

#[inline]
fn triangle(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

struct Tap {
    start: isize,
    weights: Vec<f64>,
}

/// Per-output-pixel taps for one axis, pixel-center aligned:
/// `src = (dst + 0.5) * in/out - 0.5`.
fn axis_taps(in_len: usize, out_len: usize, filter: Filter) -> Vec<Tap> {
    let ratio = in_len as f64 / out_len as f64;
    // Kernel stretch for anti-aliased minification.
    let scale = ratio.max(1.0);
    let (kernel, support): (fn(f64) -> f64, f64) = match filter {
        Filter::CatmullRom => (catmull_rom, 2.0),
        Filter::Bilinear => (triangle, 1.0),
        Filter::Nearest => (triangle, 1.0), // unused
    };
    let radius = support * scale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            if filter == Filter::Nearest {
                let idx = center.round().clamp(0.0, in_len as f64 - 1.0) as isize;
                return Tap { start: idx, weights: vec![1.0] };
            }
            let lo = (center - radius).floor() as isize;
            let hi = (center + radius).ceil() as isize;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut sum = 0.0;
            for i in lo..=hi {
                let w = kernel((i as f64 - center) / scale);
                weights.push(w);
                sum += w;
            }
            if sum != 0.0 {
                for w in &mut weights {
                    *w /= sum;
                }
            }
            Tap { start: lo, weights }
        })
        .collect()
}

fn resample_plane(
    src: &[f32],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    filter: Filter,
) -> Vec<f32> {
    let x_taps = axis_taps(in_w, out_w, filter);
    let y_taps = axis_taps(in_h, out_h, filter);

    // Horizontal pass.
    let mut tmp = vec![0.0f64; in_h * out_w];
    for y in 0..in_h {
        let row = &src[y * in_w..(y + 1) * in_w];
        for (x, tap) in x_taps.iter().enumerate() {
            let mut acc = 0.0f64;
            for (k, &w) in tap.weights.iter().enumerate() {
                let ix = (tap.start + k as isize).clamp(0, in_w as isize - 1) as usize;
                acc += w * row[ix] as f64;
            }
            tmp[y * out_w + x] = acc;
        }
    }

    // Vertical pass.
    let mut out = vec![0.0f32; out_h * out_w];
    for (y, tap) in y_taps.iter().enumerate() {
        for x in 0..out_w {
            let mut acc = 0.0f64;
            for (k, &w) in tap.weights.iter().enumerate() {
                let iy = (tap.start + k as isize).clamp(0, in_h as isize - 1) as usize;
                acc += w * tmp[iy * out_w + x];
            }
            out[y * out_w + x] = acc as f32;
        }
    }
    out
}

pub fn resize_rgb(img: &RgbImage, out_h: usize, out_w: usize, filter: Filter) -> RgbImage {
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        data.extend(resample_plane(img.plane(c), img.height, img.width, out_h, out_w, filter));
    }
    RgbImage::from_planes(out_h, out_w, data).expect("computed shape")
}

pub fn resize_gray(img: &GrayImage, out_h: usize, out_w: usize, filter: Filter) -> GrayImage {
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let data = resample_plane(img.data(), img.height, img.width, out_h, out_w, filter);
    GrayImage::from_data(out_h, out_w, data).expect("computed shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_preserved() {
        let img = RgbImage::filled(16, 24, [0.3, 0.6, 0.9]);
        for filter in [Filter::Nearest, Filter::Bilinear, Filter::CatmullRom] {
            let out = resize_rgb(&img, 4, 6, filter);
            for c in 0..3 {
                for v in out.plane(c) {
                    assert!((v - img.get(c, 0, 0)).abs() < 1e-6, "{filter:?}");
                }
            }
        }
    }

    #[test]
    fn identity_size_is_clone() {
        let mut img = RgbImage::new(5, 7);
        img.set(2, 3, 4, 0.5);
        let out = resize_rgb(&img, 5, 7, Filter::CatmullRom);
        assert_eq!(img, out);
    }

    #[test]
    fn upscale_interpolates_linear_ramp() {
        // A linear ramp must be reproduced by the cubic filter away from edges.
        let mut img = GrayImage::new(4, 16);
        for y in 0..4 {
            for x in 0..16 {
                img.set(y, x, x as f32 / 15.0);
            }
        }
        let out = resize_gray(&img, 4, 32, Filter::CatmullRom);
        for x in 4..28 {
            let src_x = (x as f64 + 0.5) * 0.5 - 0.5;
            let expect = src_x / 15.0;
            assert!((out.get(2, x) as f64 - expect).abs() < 1e-6);
        }
    }
}
