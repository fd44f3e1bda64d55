//! Run configuration: flat UTF-8 `section.key=value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! documented default (see [`KEYS`]); unknown or repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::data::SynthDatasetSpec;
use crate::error::{Error, Result};
use crate::explain::{TargetClass, Upsample};
use crate::model::{EncoderConfig, ModelConfig};
use crate::optim::LarsConfig;
use crate::train::{FinetuneConfig, FreezeMode, PretrainConfig};

/// A recognized key with its default value and a one-line description.
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(key: &'static str, default: &'static str, doc: &'static str) -> KeyDoc {
    KeyDoc { key, default, doc }
}

pub const KEYS: &[KeyDoc] = &[
    k(
        "seed",
        "0",
        "root seed; every random draw is a substream of it",
    ),
    k(
        "data.unlabeled",
        "",
        "flat directory of unlabeled images (pretrain)",
    ),
    k(
        "data.train",
        "",
        "labeled directory with benign/ and malignant/ (finetune)",
    ),
    k(
        "data.eval",
        "",
        "labeled directory with benign/ and malignant/ (eval)",
    ),
    k(
        "data.checkpoint",
        "",
        "input checkpoint (finetune, eval, embed, explain)",
    ),
    k("synth.unlabeled", "256", "unlabeled pool size"),
    k("synth.labeled", "200", "labeled images, half per class"),
    k("synth.image_size", "64", "square side in pixels"),
    k("synth.blob_contrast", "0.5", "peak of the malignant blob"),
    k("synth.noise_sigma", "0.05", "Gaussian pixel noise"),
    k(
        "synth.train_fraction",
        "0.8",
        "share of each class in the train split",
    ),
    k(
        "augment.crop_scale_min",
        "0.5",
        "smallest crop side over the shorter image side",
    ),
    k(
        "augment.crop_scale_max",
        "0.8",
        "largest crop side over the shorter image side",
    ),
    k("augment.target_size", "32", "network input side"),
    k(
        "augment.flip_prob",
        "0.5",
        "horizontal and vertical flip probability each",
    ),
    k(
        "augment.brightness_range",
        "0.8,1.2",
        "multiplicative brightness factor range",
    ),
    k("augment.contrast_range", "0.8,1.2", "contrast factor range"),
    k(
        "augment.contrast_prob",
        "0.2",
        "probability of a contrast change",
    ),
    k("augment.norm_mean", "0.5", "input normalization mean"),
    k("augment.norm_std", "0.5", "input normalization std"),
    k(
        "model.preset",
        "paper",
        "encoder preset: paper, full or tiny",
    ),
    k(
        "model.projection_hidden",
        "0",
        "projection hidden width; 0 = feature dimension",
    ),
    k(
        "model.projection_dim",
        "128",
        "contrastive embedding dimension",
    ),
    k("loss.tau", "0.5", "contrastive temperature"),
    k("optim.momentum", "0.9", "LARS momentum"),
    k("optim.weight_decay", "1e-6", "LARS weight decay"),
    k("optim.trust_coefficient", "1e-3", "LARS trust coefficient"),
    k(
        "optim.exclude_bias_and_norm",
        "true",
        "biases and BN parameters skip adaptation and decay",
    ),
    k(
        "schedule.base_lr",
        "auto",
        "peak learning rate; auto = 0.3 * N / 256",
    ),
    k("schedule.final_lr", "0", "learning rate at the last step"),
    k(
        "schedule.warmup_fraction",
        "0.1",
        "linear warmup share of all steps, cosine decay after",
    ),
    k("pretrain.epochs", "60", "contrastive epochs"),
    k(
        "pretrain.batch_pairs",
        "128",
        "source images N per batch (2N views)",
    ),
    k("finetune.epochs", "40", "classifier epochs"),
    k("finetune.batch_size", "32", "classifier batch size"),
    k("finetune.lr", "0.01", "classifier learning rate"),
    k("finetune.momentum", "0.9", "classifier SGD momentum"),
    k(
        "finetune.freeze",
        "encoder_all",
        "encoder_all or all_but_last_stage",
    ),
    k(
        "explain.class",
        "predicted",
        "target class index or predicted",
    ),
    k("explain.upsample", "bilinear", "bilinear or nearest"),
];

/// Resolved key/value configuration with defaults applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|d| (d.key, d.default.to_string()))
                .collect(),
        }
    }
}

fn known(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .map(|d| d.key)
        .find(|&k| k == key)
        .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, found {line:?}",
                    n + 1
                ))
            })?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), n + 1) {
                return Err(Error::Config(format!(
                    "line {}: {key} already set on line {prev}",
                    n + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = known(key)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        Ok(&self.values[known(key)?])
    }

    fn typed<V: FromStr>(&self, key: &str) -> Result<V> {
        parse_value(key, self.get(key)?)
    }

    fn pair(&self, key: &str) -> Result<[f32; 2]> {
        let raw = self.get(key)?;
        let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
        match parts[..] {
            [a, b] => Ok([parse_value(key, a)?, parse_value(key, b)?]),
            _ => Err(Error::Config(format!(
                "{key}: expected lo,hi, found {raw:?}"
            ))),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let raw = self.get(key)?;
        Ok((!raw.is_empty()).then(|| PathBuf::from(raw)))
    }

    /// Builds every typed section, so all parse and range errors surface here.
    pub fn validate(&self) -> Result<()> {
        self.pretrain()?.validate()?;
        self.finetune()?.validate()?;
        self.explain_target()?;
        self.explain_upsample()?;
        let s = self.synth()?;
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "synth.train_fraction {} outside (0, 1)",
                s.train_fraction
            )));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    pub fn unlabeled_dir(&self) -> Result<Option<PathBuf>> {
        self.path("data.unlabeled")
    }

    pub fn train_dir(&self) -> Result<Option<PathBuf>> {
        self.path("data.train")
    }

    pub fn eval_dir(&self) -> Result<Option<PathBuf>> {
        self.path("data.eval")
    }

    pub fn checkpoint(&self) -> Result<Option<PathBuf>> {
        self.path("data.checkpoint")
    }

    pub fn synth(&self) -> Result<SynthDatasetSpec> {
        Ok(SynthDatasetSpec {
            unlabeled: self.typed("synth.unlabeled")?,
            labeled: self.typed("synth.labeled")?,
            image_size: self.typed("synth.image_size")?,
            blob_contrast: self.typed("synth.blob_contrast")?,
            noise_sigma: self.typed("synth.noise_sigma")?,
            train_fraction: self.typed("synth.train_fraction")?,
        })
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let cfg = AugmentConfig {
            crop_scale_min: self.typed("augment.crop_scale_min")?,
            crop_scale_max: self.typed("augment.crop_scale_max")?,
            target_size: self.typed("augment.target_size")?,
            flip_prob: self.typed("augment.flip_prob")?,
            brightness_range: self.pair("augment.brightness_range")?,
            contrast_range: self.pair("augment.contrast_range")?,
            contrast_prob: self.typed("augment.contrast_prob")?,
            norm_mean: self.typed("augment.norm_mean")?,
            norm_std: self.typed("augment.norm_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            encoder: EncoderConfig::preset(self.get("model.preset")?)?,
            projection_hidden: self.typed("model.projection_hidden")?,
            projection_dim: self.typed("model.projection_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let base_lr = match self.get("schedule.base_lr")? {
            "auto" => None,
            raw => Some(parse_value("schedule.base_lr", raw)?),
        };
        Ok(PretrainConfig {
            model: self.model()?,
            epochs: self.typed("pretrain.epochs")?,
            pairs_per_batch: self.typed("pretrain.batch_pairs")?,
            tau: self.typed("loss.tau")?,
            lars: LarsConfig {
                momentum: self.typed("optim.momentum")?,
                weight_decay: self.typed("optim.weight_decay")?,
                trust_coefficient: self.typed("optim.trust_coefficient")?,
                exclude_bias_and_norm: self.typed("optim.exclude_bias_and_norm")?,
            },
            base_lr,
            final_lr: self.typed("schedule.final_lr")?,
            warmup_fraction: self.typed("schedule.warmup_fraction")?,
            augment: self.augment()?,
            seed: self.seed()?,
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            epochs: self.typed("finetune.epochs")?,
            batch_size: self.typed("finetune.batch_size")?,
            lr: self.typed("finetune.lr")?,
            momentum: self.typed("finetune.momentum")?,
            freeze_mode: FreezeMode::from_str(self.get("finetune.freeze")?)?,
            seed: self.seed()?,
        })
    }

    pub fn explain_target(&self) -> Result<TargetClass> {
        self.get("explain.class")?.parse()
    }

    pub fn explain_upsample(&self) -> Result<Upsample> {
        match self.get("explain.upsample")? {
            "bilinear" => Ok(Upsample::Bilinear),
            "nearest" => Ok(Upsample::Nearest),
            other => Err(Error::Config(format!(
                "explain.upsample {other:?} (expected bilinear or nearest)"
            ))),
        }
    }

    /// Every key in declaration order, one `key=value` per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for d in KEYS {
            let _ = writeln!(out, "{}={}", d.key, self.values[d.key]);
        }
        out
    }

    /// The dump annotated with each key's description.
    pub fn documented_defaults() -> String {
        let mut out = String::new();
        for d in KEYS {
            let _ = writeln!(out, "# {}\n{}={}", d.doc, d.key, d.default);
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        KEYS.iter()
            .map(|d| {
                (
                    d.key.to_string(),
                    serde_json::Value::from(self.values[d.key].clone()),
                )
            })
            .collect()
    }

    /// Inverse of [`RunConfig::to_json`]; keys absent from `value` keep their
    /// defaults.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::Config("configuration snapshot is not an object".into()))?;
        let mut cfg = Self::default();
        for (key, v) in map {
            let text = v
                .as_str()
                .ok_or_else(|| Error::Config(format!("{key}: expected a string value")))?;
            cfg.set(key, text)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump()).map_err(|e| Error::file(path, e))
    }
}
