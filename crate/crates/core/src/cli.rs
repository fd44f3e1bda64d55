//! Batch command-line interface. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::io::read_image;
use crate::data::{list_images, load_labeled, load_unlabeled, synth_dataset};
use crate::error::{Error, Result};
use crate::explain::{gradcam, render_heatmap, RenderedPaths};
use crate::metrics::write_scores;
use crate::train::{
    embed_images, evaluate, finetune, load_checkpoint, pretrain_until, save_checkpoint,
    write_epoch_log, Checkpoint, Phase, PretrainState,
};

pub const RESOLVED_CONFIG: &str = "resolved.conf";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_epochs.csv";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const FINETUNE_LOG: &str = "finetune_epochs.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

#[derive(Parser, Debug)]
#[command(
    name = "clmammo",
    version,
    about = "Contrastive pretraining, linear probing and Grad-CAM for grayscale images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file of key=value lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Extra configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic unlabeled pool and labeled train/eval sets.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Labeled image count (half per class).
        #[arg(long)]
        n: Option<usize>,
        /// Unlabeled pool size.
        #[arg(long)]
        unlabeled: Option<usize>,
    },
    /// Contrastive pretraining on a flat image directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue a saved pretraining checkpoint up to the configured epochs.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Train the classifier head on a labeled directory.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Score a labeled directory with a fine-tuned checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Export encoder features of every image in a directory.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Grad-CAM heatmaps for an image or every image in a directory.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Target class index, or "predicted".
        #[arg(long = "class")]
        class: Option<String>,
        /// bilinear or nearest.
        #[arg(long)]
        upsample: Option<String>,
        input: PathBuf,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        common: Common,
        /// Print every key with its description and default instead.
        #[arg(long)]
        defaults: bool,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {item:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_arg(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn required(value: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config(format!("{what} is required")))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = required(common.out.clone(), "--out")?;
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    Ok(dir)
}

fn finished(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_dump(&out.join(RESOLVED_CONFIG))
}

fn load_finetuned(cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(&required(
        cfg.checkpoint()?,
        "--checkpoint (or data.checkpoint)",
    )?)?;
    if ckpt.phase != Phase::Finetune {
        return Err(Error::InvalidInput(
            "checkpoint has no trained classifier head (run finetune first)".into(),
        ));
    }
    Ok(ckpt)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            n,
            unlabeled,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("synth.labeled", n.map(|n| n.to_string())),
                    ("synth.unlabeled", unlabeled.map(|n| n.to_string())),
                ],
            )?;
            let out = out_dir(&common)?;
            let spec = cfg.synth()?;
            let data = synth_dataset(&spec, cfg.seed()?).map_err(|e| match e {
                Error::InvalidInput(m) => Error::Config(m),
                other => other,
            })?;
            data.write(&out)?;
            eprintln!(
                "wrote {} unlabeled, {} train, {} eval images to {}",
                data.unlabeled.len(),
                data.train.len(),
                data.eval.len(),
                out.display()
            );
            finished(&cfg, &out)
        }
        Command::Pretrain {
            common,
            data,
            resume,
        } => {
            let cfg = resolve(&common, &[("data.unlabeled", path_arg(&data))])?;
            let out = out_dir(&common)?;
            let pcfg = cfg.pretrain()?;
            let images = load_unlabeled(&required(
                cfg.unlabeled_dir()?,
                "--data (or data.unlabeled)",
            )?)?;
            if images.len() < pcfg.pairs_per_batch {
                return Err(Error::InvalidInput(format!(
                    "{} unlabeled images cannot fill one batch of {} sources",
                    images.len(),
                    pcfg.pairs_per_batch
                )));
            }
            let mut state = match &resume {
                Some(path) => PretrainState::from_checkpoint(&load_checkpoint(path)?, &pcfg)?,
                None => PretrainState::new(&pcfg)?,
            };
            let mut log = Vec::new();
            while state.epoch < pcfg.epochs {
                let next = state.epoch + 1;
                let rec = pretrain_until(&mut state, &pcfg, &images, next)?;
                for r in &rec {
                    eprintln!(
                        "pretrain epoch {} loss {:.6} lr {:.6}",
                        r.epoch, r.loss, r.lr
                    );
                }
                log.extend(rec);
            }
            save_checkpoint(
                &state.checkpoint(&pcfg, cfg.to_json()),
                &out.join(PRETRAIN_CHECKPOINT),
            )?;
            write_epoch_log(&out.join(PRETRAIN_LOG), &log)?;
            finished(&cfg, &out)
        }
        Command::Finetune {
            common,
            checkpoint,
            data,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("data.checkpoint", path_arg(&checkpoint)),
                    ("data.train", path_arg(&data)),
                ],
            )?;
            let out = out_dir(&common)?;
            let ckpt = load_checkpoint(&required(
                cfg.checkpoint()?,
                "--checkpoint (or data.checkpoint)",
            )?)?;
            let train = load_labeled(&required(cfg.train_dir()?, "--data (or data.train)")?)?;
            let (tuned, log) = finetune(
                &ckpt,
                &cfg.model()?,
                &cfg.finetune()?,
                &cfg.augment()?,
                &train,
                cfg.to_json(),
            )?;
            if let Some(last) = log.last() {
                eprintln!(
                    "finetune epoch {} loss {:.6} accuracy {:.4}",
                    last.epoch,
                    last.loss,
                    last.accuracy.unwrap_or(0.0)
                );
            }
            save_checkpoint(&tuned, &out.join(FINETUNE_CHECKPOINT))?;
            write_epoch_log(&out.join(FINETUNE_LOG), &log)?;
            finished(&cfg, &out)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("data.checkpoint", path_arg(&checkpoint)),
                    ("data.eval", path_arg(&data)),
                ],
            )?;
            let out = out_dir(&common)?;
            let ckpt = load_finetuned(&cfg)?;
            let samples = load_labeled(&required(cfg.eval_dir()?, "--data (or data.eval)")?)?;
            let (report, rows) = evaluate(&ckpt.model, &samples, &cfg.augment()?)?;
            eprintln!(
                "accuracy {:.4} f1 {:.4} auc {:.4}",
                report.accuracy, report.f1, report.auc
            );
            report.write(&out.join(METRICS_FILE))?;
            write_scores(&out.join(SCORES_FILE), &rows)?;
            finished(&cfg, &out)
        }
        Command::Embed {
            common,
            checkpoint,
            data,
        } => {
            let cfg = resolve(&common, &[("data.checkpoint", path_arg(&checkpoint))])?;
            let out = out_dir(&common)?;
            let ckpt = load_checkpoint(&required(
                cfg.checkpoint()?,
                "--checkpoint (or data.checkpoint)",
            )?)?;
            let files = list_images(&data)?;
            if files.is_empty() {
                return Err(Error::file(&data, "no .pgm or .png images found"));
            }
            let images = files
                .iter()
                .map(|p| read_image(p))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = images.iter().collect();
            let features = embed_images(&ckpt.model, &refs, &cfg.augment()?)?;
            write_embeddings(&out.join(EMBEDDINGS_FILE), &files, &features)?;
            finished(&cfg, &out)
        }
        Command::Explain {
            common,
            checkpoint,
            class,
            upsample,
            input,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("data.checkpoint", path_arg(&checkpoint)),
                    ("explain.class", class),
                    ("explain.upsample", upsample),
                ],
            )?;
            let ckpt = load_finetuned(&cfg)?;
            let (target, mode, augment) = (
                cfg.explain_target()?,
                cfg.explain_upsample()?,
                cfg.augment()?,
            );
            let files = explain_inputs(&input)?;
            let out = match &common.out {
                Some(_) => out_dir(&common)?,
                None if input.is_dir() => input.clone(),
                None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            for path in &files {
                let image = read_image(path)?;
                let mut e = gradcam(&ckpt.model, &image, &augment, target, mode)?;
                e.heatmap.source = Some(path.clone());
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                render_heatmap(&e, &image, mode, &RenderedPaths::new(&out, stem))?;
            }
            eprintln!("explained {} images into {}", files.len(), out.display());
            if common.out.is_some() {
                finished(&cfg, &out)?;
            }
            Ok(())
        }
        Command::Config { common, defaults } => {
            if defaults {
                print!("{}", RunConfig::documented_defaults());
            } else {
                print!("{}", resolve(&common, &[])?.dump());
            }
            Ok(())
        }
    }
}

/// The image itself, or every image of a directory except earlier heatmaps.
fn explain_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let files: Vec<PathBuf> = list_images(input)?
            .into_iter()
            .filter(|p| !p.to_string_lossy().contains(".gradcam."))
            .collect();
        if files.is_empty() {
            return Err(Error::file(input, "no .pgm or .png images found"));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::file(input, "no such file or directory"))
    }
}

/// `file,f0,...,f{d-1}` with one row per image.
pub fn write_embeddings(path: &Path, files: &[PathBuf], features: &crate::Tensor) -> Result<()> {
    let dim = features.shape()[1];
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    let header = std::iter::once("file".to_string()).chain((0..dim).map(|i| format!("f{i}")));
    w.write_record(header).map_err(|e| Error::file(path, e))?;
    for (file, row) in files.iter().zip(features.data().chunks(dim)) {
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let record = std::iter::once(name).chain(row.iter().map(|v| v.to_string()));
        w.write_record(record).map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}
