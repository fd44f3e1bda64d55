//! Contrastive pretraining, linear-probe fine-tuning with a frozen encoder,
//! evaluation, epoch logs and checkpoints.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Phase, RngState};

use crate::augment::{make_view_pair_batch, prepare_eval, stack, AugmentConfig};
use crate::data::{class_counts, GrayImage, Label, LabeledSample};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, Temperature};
use crate::metrics::{MetricsReport, ScoreRow};
use crate::model::{stage_prefix, Binding, EncoderConfig, ForwardCtx, Model, ModelConfig};
use crate::optim::{lars_step, lr_at, sgd_step, LarsConfig, OptimState, ScheduleConfig};
use crate::rng::{derive_seed, purpose, substream};
use crate::tensor::{Tape, Tensor};

/// Rows per forward pass when only inference is needed.
pub const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Sources per batch; each batch holds `2N` views.
    pub pairs_per_batch: usize,
    pub tau: f64,
    pub lars: LarsConfig,
    /// `None` resolves to `0.3 * N / 256`.
    pub base_lr: Option<f64>,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::new(EncoderConfig::paper()),
            epochs: 60,
            pairs_per_batch: 128,
            tau: 0.5,
            lars: LarsConfig::default(),
            base_lr: None,
            final_lr: 0.0,
            warmup_fraction: 0.1,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lars.validate()?;
        self.augment.validate()?;
        Temperature::new(self.tau).map_err(|e| Error::Config(e.to_string()))?;
        if self.epochs == 0 || self.pairs_per_batch == 0 {
            return Err(Error::Config(
                "pretraining needs epochs >= 1 and pairs_per_batch >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    pub fn resolved_base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or(0.3 * self.pairs_per_batch as f64 / 256.0)
    }

    pub fn steps_per_epoch(&self, sources: usize) -> usize {
        sources / self.pairs_per_batch
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        let total_steps = self.epochs * steps_per_epoch;
        let warmup_steps = (self.warmup_fraction * total_steps as f64).floor() as usize;
        ScheduleConfig {
            warmup_steps,
            total_steps,
            base_lr: self.resolved_base_lr(),
            final_lr: self.final_lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Only the classifier head trains.
    EncoderAll,
    /// The last residual stage trains with the head.
    AllButLastStage,
}

impl FreezeMode {
    pub fn trainable_prefixes(self) -> Vec<String> {
        match self {
            FreezeMode::EncoderAll => vec!["classifier.".into()],
            FreezeMode::AllButLastStage => vec![stage_prefix(4), "classifier.".into()],
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeMode::EncoderAll => "encoder_all",
            FreezeMode::AllButLastStage => "all_but_last_stage",
        })
    }
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_all" => Ok(FreezeMode::EncoderAll),
            "all_but_last_stage" => Ok(FreezeMode::AllButLastStage),
            _ => Err(Error::Config(format!(
                "freeze mode {s:?} (expected encoder_all or all_but_last_stage)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub freeze_mode: FreezeMode,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            freeze_mode: FreezeMode::EncoderAll,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "fine-tuning needs epochs >= 1 and batch_size >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0) {
            return Err(Error::Config(
                "fine-tuning lr and momentum must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the per-epoch CSV log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
}

pub fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::file(path, e)))
        .collect()
}

/// Model, optimizer state and completed epochs of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub model: Model,
    pub optim: OptimState,
    pub epoch: usize,
}

impl PretrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: Model::build(cfg.model.clone(), cfg.seed)?,
            optim: OptimState::default(),
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        ckpt.expect_fingerprint(&cfg.model)?;
        if ckpt.phase != Phase::Pretrain
            || ckpt.rng.seed != cfg.seed
            || ckpt.rng.next_epoch != ckpt.epoch
        {
            return Err(Error::InvalidInput(format!(
                "checkpoint ({} epoch {}, seed {}) cannot resume pretraining with seed {}",
                ckpt.phase.as_str(),
                ckpt.epoch,
                ckpt.rng.seed,
                cfg.seed
            )));
        }
        let optim = ckpt.optimizer.clone().ok_or_else(|| {
            Error::InvalidInput("checkpoint has no optimizer state to resume from".into())
        })?;
        Ok(Self {
            model: ckpt.model.clone(),
            optim,
            epoch: ckpt.epoch,
        })
    }

    pub fn checkpoint(&self, cfg: &PretrainConfig, snapshot: serde_json::Value) -> Checkpoint {
        Checkpoint {
            phase: Phase::Pretrain,
            epoch: self.epoch,
            model: self.model.clone(),
            optimizer: Some(self.optim.clone()),
            rng: RngState {
                seed: cfg.seed,
                next_epoch: self.epoch,
            },
            config: snapshot,
        }
    }
}

fn shuffled(n: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(
        seed,
        &[purpose::SHUFFLE, phase as u64, epoch as u64],
    ));
    order
}

fn trainable_grads(
    tape: &Tape,
    ctx: &ForwardCtx,
    grads: &mut crate::tensor::Gradients<f32>,
) -> BTreeMap<String, Tensor> {
    ctx.bound
        .iter()
        .filter(|(_, &v)| tape.requires_grad(v))
        .map(|(name, &v)| {
            let g = grads.take(v).unwrap_or_else(|| tape.value(v).zeros_like());
            (name.clone(), g)
        })
        .collect()
}

/// One pretraining epoch: shuffle, drop the incomplete trailing batch,
/// augment each batch into `2N` views, NT-Xent, LARS.
pub fn pretrain_epoch(
    state: &mut PretrainState,
    cfg: &PretrainConfig,
    images: &[GrayImage],
) -> Result<EpochRecord> {
    let n = cfg.pairs_per_batch;
    let steps = cfg.steps_per_epoch(images.len());
    if steps == 0 {
        return Err(Error::InvalidInput(format!(
            "{} unlabeled images cannot fill one batch of {n} sources",
            images.len()
        )));
    }
    if state.epoch >= cfg.epochs {
        return Err(Error::InvalidInput(format!(
            "all {} epochs already completed",
            cfg.epochs
        )));
    }
    let schedule = cfg.schedule(steps);
    let order = shuffled(images.len(), cfg.seed, Phase::Pretrain, state.epoch);
    let mut total = 0.0;
    let mut lr = 0.0;
    for b in 0..steps {
        let sources: Vec<&GrayImage> = order[b * n..(b + 1) * n]
            .iter()
            .map(|&i| &images[i])
            .collect();
        let view_seed = derive_seed(cfg.seed, &[state.epoch as u64, b as u64]);
        let batch = make_view_pair_batch(&sources, &cfg.augment, view_seed)?;

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(Binding::train_all());
        let x = tape.constant(batch.views);
        let h = state.model.encode(&mut tape, &mut ctx, x)?;
        let z = state.model.project(&mut tape, &mut ctx, h)?;
        let loss = batch_loss(&mut tape, z, cfg.tau)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "contrastive loss {value} at epoch {} step {b}",
                state.epoch + 1
            )));
        }
        let mut g = tape.backward(loss)?;
        let grads = trainable_grads(&tape, &ctx, &mut g);
        lr = lr_at(state.epoch * steps + b, &schedule)?;
        lars_step(
            &mut state.model.params,
            &grads,
            &mut state.optim,
            lr,
            &cfg.lars,
        )?;
        state.model.params.apply_bn_stats(&ctx.bn_stats)?;
        total += value;
    }
    state.epoch += 1;
    Ok(EpochRecord {
        epoch: state.epoch,
        phase: Phase::Pretrain,
        loss: total / steps as f64,
        accuracy: None,
        lr,
    })
}

/// Run epochs until `until` (at most `cfg.epochs`) are complete.
pub fn pretrain_until(
    state: &mut PretrainState,
    cfg: &PretrainConfig,
    images: &[GrayImage],
    until: usize,
) -> Result<Vec<EpochRecord>> {
    let mut log = Vec::new();
    while state.epoch < until.min(cfg.epochs) {
        log.push(pretrain_epoch(state, cfg, images)?);
    }
    Ok(log)
}

/// Full pretraining run from scratch.
pub fn pretrain(
    cfg: &PretrainConfig,
    images: &[GrayImage],
    snapshot: serde_json::Value,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    if images.len() < cfg.pairs_per_batch {
        return Err(Error::InvalidInput(format!(
            "{} unlabeled images cannot fill one batch of {} sources",
            images.len(),
            cfg.pairs_per_batch
        )));
    }
    let mut state = PretrainState::new(cfg)?;
    let log = pretrain_until(&mut state, cfg, images, cfg.epochs)?;
    Ok((state.checkpoint(cfg, snapshot), log))
}

/// Stacked `[B,1,S,S]` deterministic classification inputs.
pub fn prepare_batch(images: &[&GrayImage], augment: &AugmentConfig) -> Result<Tensor> {
    let items = images
        .iter()
        .map(|img| prepare_eval(img, augment))
        .collect::<Result<Vec<_>>>()?;
    stack(&items)
}

/// Eval-mode features per image, computed in chunks.
pub fn embed_images(
    model: &Model,
    images: &[&GrayImage],
    augment: &AugmentConfig,
) -> Result<Tensor> {
    let batch = prepare_batch(images, augment)?;
    model.embed(&batch, INFERENCE_CHUNK)
}

fn frozen_snapshot(model: &Model, mode: FreezeMode) -> Vec<(String, Tensor)> {
    let binding = Binding {
        trainable: mode.trainable_prefixes(),
        bn_train: Vec::new(),
    };
    model
        .params
        .iter()
        .filter(|(name, _)| !binding.is_trainable(name))
        .map(|(name, p)| (name.clone(), p.value.clone()))
        .collect()
}

fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Linear-probe fine-tuning of a pretrained checkpoint. The classifier head
/// is re-initialized; parameters outside the trainable set are verified
/// bitwise unchanged afterwards.
pub fn finetune(
    ckpt: &Checkpoint,
    model_config: &ModelConfig,
    cfg: &FinetuneConfig,
    augment: &AugmentConfig,
    train: &[LabeledSample],
    snapshot: serde_json::Value,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    cfg.validate()?;
    ckpt.expect_fingerprint(model_config)?;
    let counts = class_counts(train);
    if let Some(missing) = Label::ALL.iter().find(|l| counts[l.index()] == 0) {
        return Err(Error::InvalidInput(format!(
            "no {:?} samples in the training data",
            missing
        )));
    }
    let mut model = ckpt.model.clone();
    model.reset_classifier(cfg.seed);
    let frozen = frozen_snapshot(&model, cfg.freeze_mode);

    let images: Vec<&GrayImage> = train.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = train.iter().map(|s| s.label.index()).collect();
    let inputs = prepare_batch(&images, augment)?;
    // frozen prefix of the network, evaluated once
    let cached = match cfg.freeze_mode {
        FreezeMode::EncoderAll => model.embed(&inputs, INFERENCE_CHUNK)?,
        FreezeMode::AllButLastStage => {
            let mut parts = Vec::new();
            for start in (0..train.len()).step_by(INFERENCE_CHUNK) {
                let end = (start + INFERENCE_CHUNK).min(train.len());
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::eval();
                let x = tape.constant(inputs.slice_rows(start, end)?);
                let a = model.encode_through(&mut tape, &mut ctx, x, 3)?;
                parts.push(tape.value(a).clone());
            }
            Tensor::concat_rows(&parts)?
        }
    };
    let binding = match cfg.freeze_mode {
        FreezeMode::EncoderAll => Binding {
            trainable: cfg.freeze_mode.trainable_prefixes(),
            bn_train: Vec::new(),
        },
        FreezeMode::AllButLastStage => Binding {
            trainable: cfg.freeze_mode.trainable_prefixes(),
            bn_train: vec![stage_prefix(4)],
        },
    };

    let mut optim = OptimState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, Phase::Finetune, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            let batch_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::new(binding.clone());
            let x = tape.constant(cached.select_rows(rows)?);
            let h = match cfg.freeze_mode {
                FreezeMode::EncoderAll => x,
                FreezeMode::AllButLastStage => {
                    let a = model.run_stages(&mut tape, &mut ctx, x, 3, 4)?;
                    tape.global_avg_pool(a)?
                }
            };
            let logits = model.classify(&mut tape, &mut ctx, h)?;
            let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classification loss {value} at epoch {}",
                    epoch + 1
                )));
            }
            correct += tape
                .value(logits)
                .data()
                .chunks(2)
                .zip(&batch_labels)
                .filter(|(l, &y)| usize::from(l[1] > l[0]) == y)
                .count();
            let mut g = tape.backward(loss)?;
            let grads = trainable_grads(&tape, &ctx, &mut g);
            sgd_step(&mut model.params, &grads, &mut optim, cfg.lr, cfg.momentum)?;
            model.params.apply_bn_stats(&ctx.bn_stats)?;
            loss_sum += value * rows.len() as f64;
        }
        log.push(EpochRecord {
            epoch: epoch + 1,
            phase: Phase::Finetune,
            loss: loss_sum / train.len() as f64,
            accuracy: Some(correct as f64 / train.len() as f64),
            lr: cfg.lr,
        });
    }
    for (name, before) in &frozen {
        if !bitwise_equal(before, model.params.tensor(name)?) {
            return Err(Error::InvalidInput(format!(
                "frozen parameter {name} changed during fine-tuning"
            )));
        }
    }
    let ckpt = Checkpoint {
        phase: Phase::Finetune,
        epoch: cfg.epochs,
        model,
        optimizer: Some(optim),
        rng: RngState {
            seed: cfg.seed,
            next_epoch: cfg.epochs,
        },
        config: snapshot,
    };
    Ok((ckpt, log))
}

/// Probability of the malignant class from two logits.
pub fn malignant_probability(logits: &[f32]) -> f64 {
    let (l0, l1) = (logits[0] as f64, logits[1] as f64);
    1.0 / (1.0 + (l0 - l1).exp())
}

/// Eval-mode scoring of a labeled set.
pub fn evaluate(
    model: &Model,
    samples: &[LabeledSample],
    augment: &AugmentConfig,
) -> Result<(MetricsReport, Vec<ScoreRow>)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let logits = model.predict_logits(&prepare_batch(&images, augment)?, INFERENCE_CHUNK)?;
    let rows: Vec<ScoreRow> = samples
        .iter()
        .zip(logits.data().chunks(2))
        .map(|(s, l)| ScoreRow::new(s.source.as_ref(), s.label, malignant_probability(l)))
        .collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    Ok((MetricsReport::from_scores(&scores, &labels)?, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn tiny_pretrain(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            model: ModelConfig::new(EncoderConfig::tiny()),
            epochs,
            pairs_per_batch: 4,
            augment: AugmentConfig {
                target_size: 16,
                ..Default::default()
            },
            seed: 5,
            ..PretrainConfig::paper()
        }
    }

    fn unlabeled(n: usize) -> Vec<GrayImage> {
        synth_generate(&SynthSpec {
            n,
            image_size: 24,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect()
    }

    #[test]
    fn schedule_resolution() {
        let cfg = PretrainConfig::paper();
        assert_eq!(cfg.resolved_base_lr(), 0.15);
        let s = cfg.schedule(10);
        assert_eq!((s.warmup_steps, s.total_steps), (60, 600));
    }

    #[test]
    fn pretrain_is_deterministic_and_drops_last_batch() {
        let cfg = tiny_pretrain(2);
        let imgs = unlabeled(10);
        let (a, log_a) = pretrain(&cfg, &imgs, serde_json::Value::Null).unwrap();
        let (b, log_b) = pretrain(&cfg, &imgs, serde_json::Value::Null).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a, b);
        assert_eq!(log_a.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2]);
        assert!(log_a
            .iter()
            .all(|r| r.loss.is_finite() && r.accuracy.is_none()));
        assert!(pretrain(&cfg, &imgs[..3], serde_json::Value::Null).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_pretrain(3);
        let imgs = unlabeled(8);
        let (_, full) = pretrain(&cfg, &imgs, serde_json::Value::Null).unwrap();

        let mut state = PretrainState::new(&cfg).unwrap();
        let mut log = pretrain_until(&mut state, &cfg, &imgs, 1).unwrap();
        let bytes = checkpoint::encode(&state.checkpoint(&cfg, serde_json::Value::Null)).unwrap();
        let mut resumed =
            PretrainState::from_checkpoint(&checkpoint::decode(&bytes).unwrap(), &cfg).unwrap();
        log.extend(pretrain_until(&mut resumed, &cfg, &imgs, 3).unwrap());
        assert_eq!(log, full);
    }

    #[test]
    fn epoch_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let rows = vec![
            EpochRecord {
                epoch: 1,
                phase: Phase::Pretrain,
                loss: 1.5,
                accuracy: None,
                lr: 0.1,
            },
            EpochRecord {
                epoch: 2,
                phase: Phase::Finetune,
                loss: 0.25,
                accuracy: Some(0.75),
                lr: 0.01,
            },
        ];
        write_epoch_log(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(
            text.starts_with("epoch,phase,loss,accuracy,lr\n1,pretrain,1.5,,0.1\n"),
            "{text}"
        );
        assert_eq!(read_epoch_log(&p).unwrap(), rows);
    }

    fn labeled(n: usize, seed: u64) -> Vec<LabeledSample> {
        synth_generate(&SynthSpec {
            n,
            image_size: 24,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn base_checkpoint() -> (Checkpoint, ModelConfig) {
        let config = ModelConfig::new(EncoderConfig::tiny());
        let model = Model::build(config.clone(), 2).unwrap();
        let ckpt = Checkpoint {
            phase: Phase::Pretrain,
            epoch: 0,
            model,
            optimizer: None,
            rng: RngState {
                seed: 2,
                next_epoch: 0,
            },
            config: serde_json::Value::Null,
        };
        (ckpt, config)
    }

    #[test]
    fn finetune_freezes_encoder() {
        let (ckpt, config) = base_checkpoint();
        let aug = AugmentConfig {
            target_size: 16,
            ..Default::default()
        };
        let cfg = FinetuneConfig {
            epochs: 3,
            batch_size: 5,
            ..Default::default()
        };
        let (tuned, log) = finetune(
            &ckpt,
            &config,
            &cfg,
            &aug,
            &labeled(12, 3),
            serde_json::Value::Null,
        )
        .unwrap();
        assert_eq!(log.len(), 3);
        for (name, p) in ckpt.model.params.iter() {
            if name.starts_with("encoder.") {
                assert!(
                    bitwise_equal(&p.value, tuned.model.params.tensor(name).unwrap()),
                    "{name}"
                );
            }
        }
        assert_ne!(
            ckpt.model.params.tensor("classifier.fc.weight").unwrap(),
            tuned.model.params.tensor("classifier.fc.weight").unwrap()
        );
    }

    #[test]
    fn finetune_last_stage_updates_only_stage4_and_head() {
        let (ckpt, config) = base_checkpoint();
        let aug = AugmentConfig {
            target_size: 16,
            ..Default::default()
        };
        let cfg = FinetuneConfig {
            epochs: 1,
            batch_size: 6,
            freeze_mode: FreezeMode::AllButLastStage,
            ..Default::default()
        };
        let (tuned, _) = finetune(
            &ckpt,
            &config,
            &cfg,
            &aug,
            &labeled(12, 3),
            serde_json::Value::Null,
        )
        .unwrap();
        for (name, p) in ckpt.model.params.iter() {
            let same = bitwise_equal(&p.value, tuned.model.params.tensor(name).unwrap());
            let trainable = name.starts_with("encoder.stage4.") || name.starts_with("classifier.");
            if !trainable {
                assert!(same, "{name}");
            }
        }
        assert_ne!(
            ckpt.model
                .params
                .tensor("encoder.stage4.block1.conv2.weight")
                .unwrap(),
            tuned
                .model
                .params
                .tensor("encoder.stage4.block1.conv2.weight")
                .unwrap()
        );
    }

    #[test]
    fn finetune_errors() {
        let (ckpt, _) = base_checkpoint();
        let aug = AugmentConfig {
            target_size: 16,
            ..Default::default()
        };
        let cfg = FinetuneConfig {
            epochs: 1,
            ..Default::default()
        };
        let other = ModelConfig::new(EncoderConfig::paper());
        let data = labeled(8, 3);
        assert!(matches!(
            finetune(&ckpt, &other, &cfg, &aug, &data, serde_json::Value::Null),
            Err(Error::Fingerprint { .. })
        ));
        let one_class: Vec<LabeledSample> = data
            .into_iter()
            .filter(|s| s.label == Label::Benign)
            .collect();
        assert!(finetune(
            &ckpt,
            &ckpt.model.config,
            &cfg,
            &aug,
            &one_class,
            serde_json::Value::Null
        )
        .is_err());
    }

    #[test]
    fn evaluate_rejects_empty_and_reports() {
        let (ckpt, _) = base_checkpoint();
        let aug = AugmentConfig {
            target_size: 16,
            ..Default::default()
        };
        assert!(evaluate(&ckpt.model, &[], &aug).is_err());
        let data = labeled(6, 4);
        let (report, rows) = evaluate(&ckpt.model, &data, &aug).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(report.confusion.total(), 6);
    }

    #[test]
    fn malignant_probability_is_softmax() {
        assert_eq!(malignant_probability(&[0.0, 0.0]), 0.5);
        let p = malignant_probability(&[1.0, 3.0]);
        assert!((p - 3f64.exp() / (1f64.exp() + 3f64.exp())).abs() < 1e-12);
    }
}
