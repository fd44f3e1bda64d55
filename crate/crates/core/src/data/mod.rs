//! Grayscale image datasets: loading, synthetic generation and stratified
//! splitting.

pub mod io;
mod synth;

pub use synth::{
    synth_dataset, synth_generate, SynthDataset, SynthDatasetSpec, SynthSpec, MANIFEST_FILE,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, substream};

/// Single-channel image with row-major pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Image with pixels clamped into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(width, height, pixels)
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f32 {
        (self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64) as f32
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Binary class label; malignant is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malignant];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            _ => Err(Error::InvalidInput(format!(
                "label {i} is not 0 (benign) or 1 (malignant)"
            ))),
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: GrayImage,
    pub label: Label,
    /// File the sample was read from, when it came from disk.
    pub source: Option<PathBuf>,
}

impl LabeledSample {
    pub fn new(image: GrayImage, label: Label) -> Self {
        Self {
            image,
            label,
            source: None,
        }
    }
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        if path.is_file() && io::ImageKind::from_path(&path).is_some() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// All images of a flat directory in file-name order.
pub fn load_unlabeled(dir: &Path) -> Result<Vec<GrayImage>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::file(dir, "no .pgm or .png images found"));
    }
    files.iter().map(|p| io::read_image(p)).collect()
}

/// Images of `<dir>/benign` (label 0) followed by `<dir>/malignant` (label 1).
pub fn load_labeled(dir: &Path) -> Result<Vec<LabeledSample>> {
    let mut samples = Vec::new();
    for label in Label::ALL {
        let sub = dir.join(label.dir_name());
        if !sub.is_dir() {
            return Err(Error::file(&sub, "missing class directory"));
        }
        let files = list_images(&sub)?;
        if files.is_empty() {
            return Err(Error::file(&sub, "class directory contains no images"));
        }
        for path in files {
            let image = io::read_image(&path)?;
            samples.push(LabeledSample {
                image,
                label,
                source: Some(path),
            });
        }
    }
    Ok(samples)
}

pub fn class_counts(samples: &[LabeledSample]) -> [usize; 2] {
    let mut counts = [0; 2];
    for s in samples {
        counts[s.label.index()] += 1;
    }
    counts
}

/// Indices of a stratified two-way split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Stratified split into train/eval parts. `fractions` are the train and eval
/// shares and must sum to one. Each part keeps the input order.
pub fn split_indices(labels: &[Label], fractions: [f64; 2], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions[0] + fractions[1] - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut substream(
            seed,
            &[purpose::SPLIT, label.index() as u64],
        ));
        let n_train = (idx.len() as f64 * fractions[0]).round() as usize;
        if n_train == 0 || n_train == idx.len() {
            return Err(Error::InvalidInput(format!(
                "split {fractions:?} of {} {} samples leaves one side without that class",
                idx.len(),
                label.dir_name()
            )));
        }
        train.extend_from_slice(&idx[..n_train]);
        eval.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok(SplitIndices { train, eval })
}

pub fn split(
    samples: &[LabeledSample],
    fractions: [f64; 2],
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let SplitIndices { train, eval } = split_indices(&labels, fractions, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&train), pick(&eval)))
}

/// Bookkeeping written next to generated or split datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source: String,
    pub counts: ClassCounts,
    pub unlabeled: usize,
    pub split_seed: u64,
    pub fractions: [f64; 2],
    pub splits: SplitCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub benign: usize,
    pub malignant: usize,
}

impl From<[usize; 2]> for ClassCounts {
    fn from(c: [usize; 2]) -> Self {
        Self {
            benign: c[0],
            malignant: c[1],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: ClassCounts,
    pub eval: ClassCounts,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(path, e))
    }
}
