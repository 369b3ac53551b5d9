//! Text-line super-resolution with a codebook-conditioned generative structure prior.
//!
//! The pipeline has five trainable stages plus the data tooling around them:
//!
//! - [`synth`] renders HR text lines with exact ground truth (labels, center
//!   locations, binary structure glyphs) over regular, perspective and curved
//!   layouts, and [`degrade`] turns them into realistic LR inputs.
//! - [`priorgen`] learns a character codebook plus a style-conditioned
//!   generator whose intermediate features act as a per-character structure
//!   prior.
//! - [`styleenc`] predicts the per-character style latent from the LR line by
//!   GAN inversion.
//! - [`ocr`] holds the two transformer heads that read character classes and
//!   center locations from the LR line.
//! - [`srnet`] is the SR network that injects the structure prior into LR
//!   features through a multi-scale transform, with a structure-conditioned
//!   discriminator.
//! - [`metrics`]/[`bench`] provide the evaluation kernels and harnesses, and
//!   [`pipeline`] wires stages, checkpoints and end-to-end inference together.

pub mod bench;
pub mod charset;
pub mod config;
pub mod degrade;
pub mod error;
pub mod geom;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod ocr;
pub mod perceptual;
pub mod pipeline;
pub mod priorgen;
pub mod resample;
pub mod srnet;
pub mod styleenc;
pub mod synth;

pub use charset::CharsetTable;
pub use error::{Error, Result};
pub use image::{GrayImage, RgbImage};

/// Environment variable pointing at the font/background asset root.
pub const ASSET_ROOT_ENV: &str = "TEXTSR_ASSETS";

/// Canvas height of HR text lines in pixels.
pub const HR_HEIGHT: usize = 128;

/// Side length of per-character structure images.
pub const STRUCT_SIZE: usize = 128;

/// Dimension of character codes and style vectors.
pub const LATENT_DIM: usize = 512;

/// Longest decodable character sequence.
pub const MAX_TEXT_LEN: usize = 16;

/// Default width (in pixels) HR lines are zero-padded to for batched SR.
pub const DEFAULT_PAD_WIDTH: usize = 2048;
