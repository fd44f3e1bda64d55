use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::fs;
use std::path::Path;

use super::io::write_image;
use super::{class_counts, split, DatasetManifest, GrayImage, Label, LabeledSample, SplitCounts};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose, substream};

/// Parameters of the synthetic benign/malignant generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub image_size: usize,
    pub blob_contrast: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 200,
            image_size: 64,
            blob_contrast: 0.5,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

const BASE_LEVEL: f64 = 0.35;
const BASE_JITTER: f64 = 0.015;
const WAVES: usize = 3;
const MAX_CYCLES: i32 = 4;
const WAVE_AMPLITUDE: f64 = 0.12;

/// Balanced synthetic set: the first `n/2` samples are benign (smooth
/// background plus pixel noise), the rest malignant (the same background law
/// plus one Gaussian bright blob). Each sample draws from its own substream.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<LabeledSample>> {
    let SynthSpec {
        n,
        image_size,
        blob_contrast,
        noise_sigma,
        seed,
    } = *spec;
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "synthetic sample count {n} must be even and positive"
        )));
    }
    if image_size < 16 {
        return Err(Error::InvalidInput(format!(
            "synthetic image size {image_size} < 16"
        )));
    }
    if !(noise_sigma >= 0.0) || !blob_contrast.is_finite() {
        return Err(Error::InvalidInput(
            "noise sigma must be >= 0 and contrast finite".into(),
        ));
    }
    (0..n)
        .map(|i| {
            let label = if i < n / 2 {
                Label::Benign
            } else {
                Label::Malignant
            };
            let image = synth_image(image_size, label, blob_contrast, noise_sigma, seed, i)?;
            Ok(LabeledSample::new(image, label))
        })
        .collect()
}

fn synth_image(
    size: usize,
    label: Label,
    contrast: f32,
    noise_sigma: f32,
    seed: u64,
    index: usize,
) -> Result<GrayImage> {
    let mut rng = substream(seed, &[purpose::SYNTH, index as u64]);
    let s = size as f64;
    let base = BASE_LEVEL + rng.gen_range(-BASE_JITTER..=BASE_JITTER);
    // integer-frequency waves average to zero over the grid
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let fx = rng.gen_range(0..=MAX_CYCLES) as f64;
            let fy = if fx == 0.0 {
                rng.gen_range(1..=MAX_CYCLES)
            } else {
                rng.gen_range(-MAX_CYCLES..=MAX_CYCLES)
            } as f64;
            (
                fx,
                fy,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..WAVE_AMPLITUDE),
            )
        })
        .collect();
    let blob = match label {
        Label::Benign => None,
        Label::Malignant => {
            let sigma = s / 8.0;
            let cx = rng.gen_range(sigma..=s - 1.0 - sigma);
            let cy = rng.gen_range(sigma..=s - 1.0 - sigma);
            Some((cx, cy, sigma))
        }
    };
    let noise =
        Normal::new(0.0, noise_sigma as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base;
            for &(fx, fy, phase, amp) in &waves {
                v += amp * (2.0 * PI * (fx * xf + fy * yf) / s + phase).cos();
            }
            if let Some((cx, cy, sigma)) = blob {
                let r2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                v += contrast as f64 * (-r2 / (2.0 * sigma * sigma)).exp();
            }
            v += noise.sample(&mut rng);
            pixels.push(v as f32);
        }
    }
    GrayImage::from_clamped(size, size, pixels)
}

/// Sizes and generator settings for a complete synthetic dataset: an
/// unlabeled pretraining pool plus a labeled set split into train and eval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub unlabeled: usize,
    pub labeled: usize,
    pub image_size: usize,
    pub blob_contrast: f32,
    pub noise_sigma: f32,
    pub train_fraction: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            unlabeled: 256,
            labeled: s.n,
            image_size: s.image_size,
            blob_contrast: s.blob_contrast,
            noise_sigma: s.noise_sigma,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub unlabeled: Vec<GrayImage>,
    pub train: Vec<LabeledSample>,
    pub eval: Vec<LabeledSample>,
    pub manifest: DatasetManifest,
}

const POOL_TAG: u64 = 1;
const LABELED_TAG: u64 = 2;

pub fn synth_dataset(spec: &SynthDatasetSpec, seed: u64) -> Result<SynthDataset> {
    let gen = |n: usize, tag: u64| {
        synth_generate(&SynthSpec {
            n,
            image_size: spec.image_size,
            blob_contrast: spec.blob_contrast,
            noise_sigma: spec.noise_sigma,
            seed: derive_seed(seed, &[purpose::SYNTH, tag]),
        })
    };
    if spec.unlabeled == 0 {
        return Err(Error::InvalidInput(
            "unlabeled pool size must be positive".into(),
        ));
    }
    let mut unlabeled: Vec<GrayImage> = gen(spec.unlabeled + spec.unlabeled % 2, POOL_TAG)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    unlabeled.truncate(spec.unlabeled);
    let labeled = gen(spec.labeled, LABELED_TAG)?;
    let fractions = [spec.train_fraction, 1.0 - spec.train_fraction];
    let split_seed = derive_seed(seed, &[purpose::SPLIT]);
    let (train, eval) = split(&labeled, fractions, split_seed)?;
    let manifest = DatasetManifest {
        source: format!(
            "synth(size={}, blob_contrast={}, noise_sigma={}, seed={seed})",
            spec.image_size, spec.blob_contrast, spec.noise_sigma
        ),
        counts: class_counts(&labeled).into(),
        unlabeled: unlabeled.len(),
        split_seed,
        fractions,
        splits: SplitCounts {
            train: class_counts(&train).into(),
            eval: class_counts(&eval).into(),
        },
    };
    Ok(SynthDataset {
        unlabeled,
        train,
        eval,
        manifest,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl SynthDataset {
    /// `<root>/unlabeled/*.pgm`, `<root>/{train,eval}/{benign,malignant}/*.pgm`
    /// and `<root>/manifest.json`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = root.join("unlabeled");
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        for (i, img) in self.unlabeled.iter().enumerate() {
            write_image(&dir.join(format!("img_{i:05}.pgm")), img)?;
        }
        for (part, samples) in [("train", &self.train), ("eval", &self.eval)] {
            for label in Label::ALL {
                let dir = root.join(part).join(label.dir_name());
                fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
                for (i, s) in samples.iter().filter(|s| s.label == label).enumerate() {
                    write_image(&dir.join(format!("img_{i:05}.pgm")), &s.image)?;
                }
            }
        }
        self.manifest.write(&root.join(MANIFEST_FILE))
    }
}
