//! Command-line front end: dataset synthesis, degradation, the staged
//! training schedule, end-to-end inference, evaluation and visualization.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use textsr::charset::CharsetTable;
use textsr::config::{self, DegradeRunConfig, SynthRunConfig};
use textsr::degrade::degrade_batch;
use textsr::error::Result;
use textsr::pipeline::{self, ModelBundle, Stage, StageRunConfig};
use textsr::synth::{self, Corpus, FontSet};

#[derive(Parser)]
#[command(name = "textsr", about = "Text-line super-resolution with a generative structure prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an HR text-line dataset with ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fill the LR side of a dataset with a randomized degradation chain.
    Degrade {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the structure-prior stack (codebook + generator + recognizer).
    TrainPrior {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one recognition head.
    TrainOcr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["cls", "loc"])]
        task: String,
    },
    /// Train the style encoder against a frozen prior.
    TrainStyle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the SR branch (fine-tunes the prior stack at its own LR).
    TrainSr {
        #[arg(long)]
        config: PathBuf,
    },
    /// Collect stage checkpoints into a model bundle directory.
    Bundle {
        #[arg(long)]
        charset: Option<PathBuf>,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        ocr_cls: PathBuf,
        #[arg(long)]
        ocr_loc: PathBuf,
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run end-to-end inference on one LR image.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a bundle over dataset splits.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// name=dir pairs, e.g. regular_x4=data/eval_reg
        #[arg(long, num_args = 1.., required = true)]
        split: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-length study over whole vs segmented decoding.
    LengthStudy {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, num_args = 1.., default_values_t = [4usize, 8, 16, 32])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolation and code-disentanglement grids.
    Visualize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "8")]
        char: char,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => config::load_toml(p),
        None => Ok(T::default()),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { config: cfg_path, out, count, seed } => {
            let cfg: SynthRunConfig = load_or_default(&cfg_path)?;
            cfg.render.validate()?;
            let charset = match &cfg.charset {
                Some(p) => CharsetTable::load(p)?,
                None => CharsetTable::ascii(),
            };
            let fonts = FontSet::load_dir(
                &cfg.render.font_dir.clone().unwrap_or_else(synth::fonts::default_font_dir),
            )?;
            let corpus = match &cfg.corpus {
                Some(p) => Corpus::load(p, &charset)?,
                None => Corpus::Uniform,
            };
            let samples =
                synth::generate_dataset(&charset, &corpus, &fonts, &cfg.render, seed, count)?;
            let hash = config::config_hash(&cfg)?;
            synth::write_dataset(&samples, &out, &charset, seed, Some(hash))?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Degrade { config: cfg_path, input, out, scale, seed } => {
            let mut cfg: DegradeRunConfig = load_or_default(&cfg_path)?;
            cfg.degrade.scale = scale;
            let dataset = synth::read_dataset(&input, None)?;
            let mut samples = dataset.samples;
            degrade_batch(&mut samples, &cfg.degrade, seed)?;
            let hash = config::config_hash(&cfg)?;
            synth::write_dataset(&samples, &out, &dataset.charset, dataset.manifest.master_seed, Some(hash))?;
            println!("degraded {} samples to {}", samples.len(), out.display());
        }
        Command::TrainPrior { config } => {
            let mut cfg: StageRunConfig = config::load_toml(&config)?;
            cfg.stage = Stage::Prior;
            let out = pipeline::run_stage(&cfg)?;
            println!("prior checkpoint: {}", out.display());
        }
        Command::TrainOcr { config, task } => {
            let mut cfg: StageRunConfig = config::load_toml(&config)?;
            cfg.stage = if task == "cls" { Stage::OcrCls } else { Stage::OcrLoc };
            let out = pipeline::run_stage(&cfg)?;
            println!("ocr checkpoint: {}", out.display());
        }
        Command::TrainStyle { config } => {
            let mut cfg: StageRunConfig = config::load_toml(&config)?;
            cfg.stage = Stage::Style;
            let out = pipeline::run_stage(&cfg)?;
            println!("style checkpoint: {}", out.display());
        }
        Command::TrainSr { config } => {
            let mut cfg: StageRunConfig = config::load_toml(&config)?;
            cfg.stage = Stage::Sr;
            let out = pipeline::run_stage(&cfg)?;
            println!("sr checkpoint: {}", out.display());
        }
        Command::Bundle { charset, prior, style, ocr_cls, ocr_loc, sr, out } => {
            let charset = match charset {
                Some(p) => CharsetTable::load(&p)?,
                None => CharsetTable::ascii(),
            };
            pipeline::assemble_bundle(&out, &charset, &prior, &style, &ocr_cls, &ocr_loc, &sr)?;
            println!("bundle written to {}", out.display());
        }
        Command::Infer { bundle, image, scale, out } => {
            let bundle = ModelBundle::load(&bundle)?;
            let lr = textsr::image::RgbImage::load_png(&image)?;
            let result = bundle.infer(&lr, scale)?;
            std::fs::create_dir_all(&out)?;
            result.sr.save_png(&out.join("sr.png"))?;
            result.overlay.save_png(&out.join("overlay.png"))?;
            let text: String = result
                .labels
                .iter()
                .filter_map(|&l| bundle.charset.char_at(l))
                .collect();
            let mut lines = format!("text = {text:?}\n");
            for (l, c) in result.labels.iter().zip(&result.centers) {
                lines.push_str(&format!("char = {{ label = {l}, center_px = {c:.2} }}\n"));
            }
            std::fs::write(out.join("recognition.toml"), lines)?;
            println!(
                "sr written to {} ({} characters{})",
                out.display(),
                result.labels.len(),
                if result.prior_free { ", prior-free path" } else { "" }
            );
        }
        Command::Eval { bundle, split, out } => {
            let bundle = ModelBundle::load(&bundle)?;
            let extractor = textsr::perceptual::RandomFeatures::new()?;
            let mut splits = Vec::new();
            for spec in &split {
                let (name, dir) = spec
                    .split_once('=')
                    .ok_or_else(|| textsr::Error::invalid(format!("bad split spec {spec:?}")))?;
                let dataset = synth::read_dataset(std::path::Path::new(dir), Some(&bundle.charset))?;
                splits.push((name.to_string(), dataset.samples));
            }
            let report = textsr::bench::run_eval(&bundle, &splits, &extractor, "cli")?;
            report.save(&out)?;
            print!("{}", report.render_table());
        }
        Command::LengthStudy { bundle, lengths, count, scale, seed, out } => {
            let bundle = ModelBundle::load(&bundle)?;
            let fonts = FontSet::load_dir(&synth::fonts::default_font_dir())?;
            let render_cfg = synth::RenderConfig::default();
            let degrade_cfg = textsr::degrade::DegradeConfig { scale, ..Default::default() };
            let report = textsr::bench::run_length_study(
                &bundle,
                &bundle.charset,
                &fonts,
                &render_cfg,
                &degrade_cfg,
                &lengths,
                count,
                seed,
            )?;
            let text = toml::to_string(&report)
                .map_err(|e| textsr::Error::TomlSer(e.to_string()))?;
            std::fs::write(&out, &text)?;
            println!("{text}");
        }
        Command::Visualize { bundle, char: ch, steps, seed, out } => {
            use rand::SeedableRng;
            let bundle = ModelBundle::load(&bundle)?;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let device = bundle.prior.store.device().clone();
            let za = textsr::nn::init::randn_tensor(&mut rng, &[1, textsr::LATENT_DIM], &device)?;
            let zb = textsr::nn::init::randn_tensor(&mut rng, &[1, textsr::LATENT_DIM], &device)?;
            let wa = bundle.prior.map_w(&za)?;
            let wb = bundle.prior.map_w(&zb)?;
            std::fs::create_dir_all(&out)?;
            let grid = pipeline::visualize_interpolation(
                &bundle.prior,
                &bundle.charset,
                ch,
                &wa,
                &wb,
                steps,
            )?;
            grid.save_png(&out.join("interpolation.png"))?;
            let labels: Vec<u32> =
                (0..bundle.charset.len().min(10) as u32).collect();
            let zs = textsr::nn::init::randn_tensor(&mut rng, &[3, textsr::LATENT_DIM], &device)?;
            let ws = bundle.prior.map_w(&zs)?;
            let codes = pipeline::visualize_codes(&bundle.prior, &labels, &ws, 3)?;
            codes.save_png(&out.join("codes.png"))?;
            println!("visualizations written to {}", out.display());
        }
    }
    Ok(())
}
