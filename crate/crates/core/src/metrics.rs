//! Fidelity and recognition metric kernels. All pure functions of their
//! inputs; the evaluation harness in [`crate::bench`] builds on these.

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// PSNR is capped here for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Cost in HR pixels charged per missing/extra character when location
/// sequences have different lengths.
pub const MISSING_CENTER_COST_PX: f64 = 32.0;

/// Peak signal-to-noise ratio in dB on `[0, 1]` images, `10*log10(1/MSE)`,
/// capped at 100 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Gaussian-windowed SSIM (11x11 window, sigma 1.5, K1=0.01, K2=0.03,
/// dynamic range 1.0), averaged over valid window positions and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    const WIN: usize = 11;
    if a.height < WIN || a.width < WIN {
        return Err(Error::invalid(format!("ssim needs at least {WIN}x{WIN} images")));
    }
    let window = gaussian_window(WIN, 1.5);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..3 {
        let pa = a.plane(ch);
        let pb = b.plane(ch);
        // Separable Gaussian moments over the valid region.
        let mu_a = filter_valid(pa, a.height, a.width, &window);
        let mu_b = filter_valid(pb, a.height, a.width, &window);
        let aa: Vec<f32> = pa.iter().map(|&v| v * v).collect();
        let bb: Vec<f32> = pb.iter().map(|&v| v * v).collect();
        let ab: Vec<f32> = pa.iter().zip(pb).map(|(&x, &y)| x * y).collect();
        let mu_aa = filter_valid(&aa, a.height, a.width, &window);
        let mu_bb = filter_valid(&bb, a.height, a.width, &window);
        let mu_ab = filter_valid(&ab, a.height, a.width, &window);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = mu_aa[i] - ma * ma;
            let var_b = mu_bb[i] - mb * mb;
            let cov = mu_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| (-0.5 * ((i as f64 - c) / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable windowed mean over valid positions, `f64` accumulation.
fn filter_valid(data: &[f32], h: usize, w: usize, window: &[f64]) -> Vec<f64> {
    let n = window.len();
    let out_w = w - n + 1;
    let out_h = h - n + 1;
    let mut rows = vec![0.0f64; h * out_w];
    for y in 0..h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                acc += wk * data[y * w + x + k] as f64;
            }
            rows[y * out_w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &wk) in window.iter().enumerate() {
                acc += wk * rows[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Exact per-character accuracy with positional alignment; length
/// mismatches are scored against the longer sequence. Two empty sequences
/// count as a perfect match.
pub fn seq_accuracy(pred: &[u32], gt: &[u32]) -> f64 {
    let longer = pred.len().max(gt.len());
    if longer == 0 {
        return 1.0;
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    hits as f64 / longer as f64
}

/// Mean absolute center error in HR pixels, positional alignment. Each
/// missing or extra character is charged [`MISSING_CENTER_COST_PX`].
pub fn loc_error(pred: &[f32], gt: &[f32]) -> f64 {
    let longer = pred.len().max(gt.len());
    if longer == 0 {
        return 0.0;
    }
    let aligned: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    let missing = (pred.len() as i64 - gt.len() as i64).unsigned_abs() as f64;
    (aligned + missing * MISSING_CENTER_COST_PX) / longer as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identical_is_capped() {
        let img = RgbImage::filled(16, 16, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);
    }

    #[test]
    fn psnr_constant_offset_closed_form() {
        let a = RgbImage::filled(16, 16, [0.25, 0.25, 0.25]);
        let b = RgbImage::filled(16, 16, [0.75, 0.75, 0.75]);
        let expect = 10.0 * (1.0f64 / 0.25).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut img = RgbImage::new(24, 24);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 101) as f32 / 100.0;
        }
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seq_accuracy_examples() {
        assert_eq!(seq_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(seq_accuracy(&[1, 2, 3, 4], &[1, 9, 3, 4]), 0.75);
        assert_eq!(seq_accuracy(&[], &[]), 1.0);
        // Length mismatch scored against the longer sequence.
        assert_eq!(seq_accuracy(&[1, 2], &[1, 2, 3, 4]), 0.5);
    }

    #[test]
    fn loc_error_examples() {
        let gt: Vec<f32> = (0..8).map(|i| 40.0 * i as f32).collect();
        let pred: Vec<f32> = gt.iter().map(|c| c + 3.0).collect();
        assert!((loc_error(&pred, &gt) - 3.0).abs() < 1e-9);
        assert_eq!(loc_error(&gt, &gt), 0.0);
        // One missing char: (0 + 32) / 2.
        assert!((loc_error(&[10.0], &[10.0, 50.0]) - 16.0).abs() < 1e-9);
    }
}
