//! Evaluation harnesses: per-split fidelity/recognition reports, the
//! ablation variant rows, and the text-length study.

use crate::charset::CharsetTable;
use crate::degrade::{bicubic_up, degrade_batch, DegradeConfig};
use crate::error::{Error, Result};
use crate::metrics::{loc_error, psnr, seq_accuracy, ssim};

use crate::perceptual::{perceptual_metric, FeatureExtractor};
use crate::pipeline::ModelBundle;
use crate::synth::{render_line, LayoutChoice, LayoutKind, RenderConfig, TextSample};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitReport {
    pub name: String,
    pub scale: usize,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub acc: f64,
    pub loc_err: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    pub bicubic_perceptual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Perceptual metric backend and recognizer used for ACC.
    pub perceptual_backend: String,
    pub acc_backend: String,
    pub config_hash: String,
    pub checkpoint_hashes: Vec<(String, String)>,
    pub splits: Vec<SplitReport>,
    /// Optional ablation variant rows (variant name -> split report).
    pub variants: Vec<SplitReport>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for s in self.splits.iter().chain(&self.variants) {
            for (label, v) in [
                ("psnr", s.psnr),
                ("ssim", s.ssim),
                ("perceptual", s.perceptual),
                ("acc", s.acc),
                ("loc_err", s.loc_err),
            ] {
                if !v.is_finite() {
                    return Err(Error::invalid(format!("{}: {label} is not finite", s.name)));
                }
            }
        }
        Ok(())
    }

    /// Human-readable fixed-width table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>9} {:>7} {:>8}  (bicubic: psnr/ssim)",
            "split", "psnr", "ssim", "percep", "acc", "loc_err"
        );
        for s in self.splits.iter().chain(&self.variants) {
            let _ = writeln!(
                out,
                "{:<24} {:>7.3} {:>7.4} {:>9.5} {:>7.4} {:>8.3}  ({:.3}/{:.4})",
                s.name, s.psnr, s.ssim, s.perceptual, s.acc, s.loc_err, s.bicubic_psnr, s.bicubic_ssim
            );
        }
        let _ = writeln!(out, "perceptual backend: {}", self.perceptual_backend);
        let _ = writeln!(out, "acc backend: {}", self.acc_backend);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let toml_text = toml::to_string(self).map_err(|e| Error::TomlSer(e.to_string()))?;
        std::fs::write(path.with_extension("toml"), toml_text)?;
        std::fs::write(path.with_extension("txt"), self.render_table())?;
        Ok(())
    }
}

/// Evaluate one model bundle over one dataset split.
pub fn eval_split(
    bundle: &ModelBundle,
    samples: &[TextSample],
    name: &str,
    extractor: &dyn FeatureExtractor,
) -> Result<SplitReport> {
    if samples.is_empty() {
        return Err(Error::invalid("empty eval split"));
    }
    let scale = samples[0].scale.ok_or_else(|| Error::invalid("split not degraded"))?;
    let mut agg = SplitReport {
        name: name.to_string(),
        scale,
        count: samples.len(),
        psnr: 0.0,
        ssim: 0.0,
        perceptual: 0.0,
        acc: 0.0,
        loc_err: 0.0,
        bicubic_psnr: 0.0,
        bicubic_ssim: 0.0,
        bicubic_perceptual: 0.0,
    };
    for sample in samples {
        let lr = sample.lr.as_ref().expect("degraded");
        let hr_valid = sample.hr.crop(0, 0, sample.hr.height, sample.valid_width)?;
        let out = bundle.infer(lr, scale)?;
        let sr_valid = out.sr.crop(0, 0, out.sr.height, sample.valid_width.min(out.sr.width))?;
        let bic = bicubic_up(lr, scale);
        let bic_valid = bic.crop(0, 0, bic.height, sample.valid_width.min(bic.width))?;

        agg.psnr += psnr(&sr_valid, &hr_valid)?;
        agg.ssim += ssim(&sr_valid, &hr_valid)?;
        agg.perceptual += perceptual_metric(extractor, &sr_valid, &hr_valid)?;
        agg.bicubic_psnr += psnr(&bic_valid, &hr_valid)?;
        agg.bicubic_ssim += ssim(&bic_valid, &hr_valid)?;
        agg.bicubic_perceptual += perceptual_metric(extractor, &bic_valid, &hr_valid)?;

        // Recognition accuracy of the restored image: classify the SR
        // output downscaled back to the recognition geometry.
        let sr_labels = bundle.classify_image(&sr_valid)?;
        agg.acc += seq_accuracy(&sr_labels, &sample.labels);
        agg.loc_err += loc_error(&out.centers, &sample.centers);
    }
    let n = samples.len() as f64;
    agg.psnr /= n;
    agg.ssim /= n;
    agg.perceptual /= n;
    agg.acc /= n;
    agg.loc_err /= n;
    agg.bicubic_psnr /= n;
    agg.bicubic_ssim /= n;
    agg.bicubic_perceptual /= n;
    Ok(agg)
}

/// Deterministic evaluation over named splits, with the bicubic baseline
/// always included in every row.
pub fn run_eval(
    bundle: &ModelBundle,
    splits: &[(String, Vec<TextSample>)],
    extractor: &dyn FeatureExtractor,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        perceptual_backend: extractor.backend().to_string(),
        acc_backend: "internal-classifier".to_string(),
        config_hash: config_hash.to_string(),
        checkpoint_hashes: bundle.checkpoint_hashes(),
        splits: Vec::new(),
        variants: Vec::new(),
    };
    for (name, samples) in splits {
        report.splits.push(eval_split(bundle, samples, name, extractor)?);
    }
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthRow {
    pub length: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub acc: f64,
    pub loc_err: f64,
    /// Same inputs evaluated in recognizable segments (lengths > 16 only).
    pub segmented_acc: Option<f64>,
    pub segmented_loc_err: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthStudyReport {
    pub rows: Vec<LengthRow>,
    pub samples_per_length: usize,
}

/// Synthesize length-L lines (oversized lines bypass the dataset K cap),
/// degrade, and measure recognition/location/SR quality whole vs segmented.
#[allow(clippy::too_many_arguments)]
pub fn run_length_study(
    bundle: &ModelBundle,
    charset: &CharsetTable,
    fonts: &crate::synth::FontSet,
    render_cfg: &RenderConfig,
    degrade_cfg: &DegradeConfig,
    lengths: &[usize],
    samples_per_length: usize,
    seed: u64,
) -> Result<LengthStudyReport> {
    use rand::{Rng, SeedableRng};
    let mut rows = Vec::new();
    for (li, &len) in lengths.iter().enumerate() {
        let mut samples = Vec::with_capacity(samples_per_length);
        let mut made = 0usize;
        let mut attempt = 0u64;
        while made < samples_per_length {
            let sample_seed = crate::synth::derive_seed(seed, (li as u64) << 32 | attempt);
            attempt += 1;
            if attempt > samples_per_length as u64 * 16 {
                return Err(Error::Render(format!("could not synthesize length-{len} lines")));
            }
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(sample_seed);
            let text: String = (0..len)
                .map(|_| charset.char_at(rng.gen_range(0..charset.len() as u32)).expect("in range"))
                .collect();
            match render_line(
                charset,
                &text,
                fonts,
                LayoutChoice::Sample(LayoutKind::Regular),
                render_cfg,
                &mut rng,
                sample_seed,
            ) {
                Ok((mut s, _)) => {
                    crate::synth::quantize_to_8bit(&mut s.hr);
                    samples.push(s);
                    made += 1;
                }
                Err(_) => continue,
            }
        }
        degrade_batch(&mut samples, degrade_cfg, crate::synth::derive_seed(seed, 0xD0 + li as u64))?;

        let mut row = LengthRow {
            length: len,
            psnr: 0.0,
            ssim: 0.0,
            acc: 0.0,
            loc_err: 0.0,
            segmented_acc: None,
            segmented_loc_err: None,
        };
        let mut seg_acc = 0.0;
        let mut seg_loc = 0.0;
        for sample in &samples {
            let lr = sample.lr.as_ref().expect("degraded");
            let out = bundle.infer(lr, degrade_cfg.scale)?;
            let hr_valid = sample.hr.crop(0, 0, sample.hr.height, sample.valid_width)?;
            let sr_valid = out.sr.crop(0, 0, out.sr.height, sample.valid_width.min(out.sr.width))?;
            row.psnr += psnr(&sr_valid, &hr_valid)?;
            row.ssim += ssim(&sr_valid, &hr_valid)?;
            row.acc += seq_accuracy(&out.labels, &sample.labels);
            row.loc_err += loc_error(&out.centers, &sample.centers);

            if len > crate::MAX_TEXT_LEN {
                let (labels, centers) = bundle.recognize_segmented(lr, sample.valid_width, len)?;
                seg_acc += seq_accuracy(&labels, &sample.labels);
                seg_loc += loc_error(&centers, &sample.centers);
            }
        }
        let n = samples.len() as f64;
        row.psnr /= n;
        row.ssim /= n;
        row.acc /= n;
        row.loc_err /= n;
        if len > crate::MAX_TEXT_LEN {
            row.segmented_acc = Some(seg_acc / n);
            row.segmented_loc_err = Some(seg_loc / n);
        }
        rows.push(row);
    }
    Ok(LengthStudyReport { rows, samples_per_length })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_table_renders_and_saves_deterministically() {
        let report = EvalReport {
            perceptual_backend: "random-init-v1".into(),
            acc_backend: "internal-classifier".into(),
            config_hash: "abc".into(),
            checkpoint_hashes: vec![("prior".into(), "123".into())],
            splits: vec![SplitReport {
                name: "regular_x4".into(),
                scale: 4,
                count: 2,
                psnr: 21.5,
                ssim: 0.81,
                perceptual: 0.2,
                acc: 0.9,
                loc_err: 2.5,
                bicubic_psnr: 20.0,
                bicubic_ssim: 0.78,
                bicubic_perceptual: 0.3,
            }],
            variants: vec![],
        };
        report.validate().unwrap();
        let table = report.render_table();
        assert!(table.contains("regular_x4"));
        assert!(table.contains("random-init-v1"));
        let dir = tempfile::tempdir().unwrap();
        report.save(&dir.path().join("report")).unwrap();
        report.save(&dir.path().join("report2")).unwrap();
        let a = std::fs::read(dir.path().join("report.toml")).unwrap();
        let b = std::fs::read(dir.path().join("report2.toml")).unwrap();
        assert_eq!(a, b);
    }
}
