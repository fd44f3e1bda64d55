//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clmammo::augment::{make_view_pair_batch, AugmentConfig};
use clmammo::cli::{
    self, FINETUNE_CHECKPOINT, FINETUNE_LOG, METRICS_FILE, PRETRAIN_CHECKPOINT, PRETRAIN_LOG,
};
use clmammo::config::RunConfig;
use clmammo::data::{synth_dataset, GrayImage, Label, SynthDatasetSpec};
use clmammo::explain::{gradcam_raw, Heatmap, TargetClass, Upsample};
use clmammo::loss::{batch_loss, batch_loss_value};
use clmammo::metrics::{accuracy, f1, roc_auc, ConfusionMatrix, MetricsReport};
use clmammo::model::{
    Binding, EncoderConfig, ForwardCtx, Model, ModelConfig, ParamKind, ParamStore,
};
use clmammo::optim::{lars_step, lr_at, sgd_step, LarsConfig, OptimState};
use clmammo::tensor::{BnMode, Tape, Tensor, Var};
use clmammo::train::{
    finetune, load_checkpoint, pretrain, pretrain_until, read_epoch_log, save_checkpoint,
    write_epoch_log, FinetuneConfig, FreezeMode, PretrainConfig, PretrainState,
};
use common::*;
use rand::Rng;

fn report(n: usize, ok: bool, detail: &str) {
    println!(
        "criterion {n}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- 1

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> clmammo::Result<Var>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut r = rng(seed);
    let mut dim = |lo: usize, hi: usize| r.gen_range(lo..=hi);
    let (m, k, p) = (dim(1, 5), dim(1, 5), dim(1, 5));
    let (n, c, h) = (dim(1, 3), dim(1, 3), dim(3, 7));
    let (f, ks) = (dim(1, 3), [1usize, 3][dim(0, 1)]);
    let (stride, pad) = (dim(1, 2), dim(0, 1));
    let mut t = rng(seed ^ 0xabc);
    let mut rt = |shape: &[usize]| random_tensor(&mut t, shape);
    let ws = seed;
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    cases.push((
        "matmul",
        vec![rt(&[m, k]), rt(&[k, p])],
        Box::new(move |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "add_bias",
        vec![rt(&[m, p]), rt(&[p])],
        Box::new(move |tp, v| {
            let y = tp.add_bias(v[0], v[1])?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "add",
        vec![rt(&[n, c, h]), rt(&[n, c, h])],
        Box::new(move |tp, v| {
            let y = tp.add(v[0], v[1])?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "mul",
        vec![rt(&[m, k]), rt(&[m, k])],
        Box::new(move |tp, v| {
            let y = tp.mul(v[0], v[1])?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "scale",
        vec![rt(&[m, k])],
        Box::new(move |tp, v| {
            let y = tp.scale(v[0], -1.7);
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "sum",
        vec![rt(&[m, k])],
        Box::new(|tp, v| {
            let sq = tp.mul(v[0], v[0])?;
            Ok(tp.sum(sq))
        }),
    ));
    cases.push((
        "reshape",
        vec![rt(&[m, k])],
        Box::new(move |tp, v| {
            let y = tp.reshape(v[0], &[m * k])?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "relu",
        vec![rt(&[m, k, p])],
        Box::new(move |tp, v| {
            let y = tp.relu(v[0]);
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "conv2d",
        vec![rt(&[n, c, h, h]), rt(&[f, c, ks, ks])],
        Box::new(move |tp, v| {
            let y = tp.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "batch_norm_train",
        vec![rt(&[n + 1, c, h, h]), rt(&[c]), rt(&[c])],
        Box::new(move |tp, v| {
            let (y, _) = tp.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?;
            weighted_sum(tp, y, ws)
        }),
    ));
    let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
    let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.25 * i as f64).collect();
    cases.push((
        "batch_norm_eval",
        vec![rt(&[n, c, h, h]), rt(&[c]), rt(&[c])],
        Box::new(move |tp, v| {
            let mode = BnMode::Eval {
                mean: &mean,
                var: &var,
                eps: 1e-5,
            };
            let (y, _) = tp.batch_norm(v[0], v[1], v[2], mode)?;
            weighted_sum(tp, y, ws)
        }),
    ));
    let (size, pstride, ppad) = [(2, 2, 0), (3, 2, 1), (2, 1, 0)][seed as usize % 3];
    cases.push((
        "max_pool2d",
        vec![rt(&[n, c, h, h])],
        Box::new(move |tp, v| {
            let y = tp.max_pool2d(v[0], size, pstride, ppad)?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "global_avg_pool",
        vec![rt(&[n, c, h, h])],
        Box::new(move |tp, v| {
            let y = tp.global_avg_pool(v[0])?;
            weighted_sum(tp, y, ws)
        }),
    ));
    cases.push((
        "l2_normalize",
        vec![rt(&[m, k + 1])],
        Box::new(move |tp, v| {
            let y = tp.l2_normalize(v[0])?;
            weighted_sum(tp, y, ws)
        }),
    ));
    let labels: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % (p + 1)).collect();
    cases.push((
        "softmax_cross_entropy",
        vec![rt(&[m, p + 1])],
        Box::new(move |tp, v| tp.softmax_cross_entropy(v[0], &labels)),
    ));
    let tau = [0.1, 0.5][seed as usize % 2];
    cases.push((
        "nt_xent",
        vec![rt(&[2 * dim(1, 3), k + 2])],
        Box::new(move |tp, v| {
            let z = tp.l2_normalize(v[0])?;
            batch_loss(tp, z, tau)
        }),
    ));
    cases
}

fn network_check(seed: u64) -> GradCheck {
    let model: Model<f64> = Model::build(ModelConfig::new(EncoderConfig::tiny()), seed)
        .unwrap()
        .cast();
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| !p.kind.is_buffer())
        .map(|(n, _)| n.clone())
        .collect();
    let mut inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| model.params.tensor(n).unwrap().clone())
        .collect();
    inputs.push(random_tensor(&mut rng(seed + 100), &[4, 1, 16, 16]));
    let build = move |tp: &mut Tape<f64>, v: &[Var]| {
        let mut ctx = ForwardCtx::new(Binding::train_all());
        for (name, var) in names.iter().zip(v) {
            ctx.bound.insert(name.clone(), *var);
        }
        let x = *v.last().unwrap();
        let h = model.encode(tp, &mut ctx, x)?;
        let z = model.project(tp, &mut ctx, h)?;
        let contrastive = batch_loss(tp, z, 0.5)?;
        let logits = model.classify(tp, &mut ctx, h)?;
        let ce = tp.softmax_cross_entropy(logits, &[0, 1, 1, 0])?;
        tp.add(contrastive, ce)
    };
    grad_check(&inputs, build, 3, NET_FD, seed)
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut total = GradCheck::default();
    let mut cases = 0;
    let mut worst = ("", 0.0);
    for seed in 0..3 {
        for (name, inputs, build) in op_cases(seed) {
            let c = grad_check(&inputs, build, usize::MAX, OP_FD, seed);
            if c.max_rel > worst.1 {
                worst = (name, c.max_rel);
            }
            total = total.merge(c);
            cases += 1;
        }
    }
    for seed in 0..4 {
        let c = network_check(seed);
        if c.max_rel > worst.1 {
            worst = ("tiny network", c.max_rel);
        }
        total = total.merge(c);
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = total.max_rel < 1e-4 && cases >= 20 && secs < 120.0;
    report(
        1,
        ok,
        &format!(
            "{cases} cases, {} gradients, max rel err {:.2e} ({}), {secs:.1}s",
            total.checked, total.max_rel, worst.0
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_nt_xent() {
    let mut r = rng(2);
    let mut max_err = 0.0f64;
    let mut trials = 0;
    for n in [1usize, 2, 4, 8] {
        for tau in [0.1, 0.5] {
            for _ in 0..50 {
                let raw = random_tensor(&mut r, &[2 * n, 6]);
                let z = unit_rows(&raw);
                let rows: Vec<Vec<f64>> = z.data().chunks(6).map(|c| c.to_vec()).collect();
                let expected = nt_xent_oracle(&rows, tau);
                let value = batch_loss_value(&z, tau).unwrap();
                let mut tape = Tape::new();
                let v = tape.constant(z);
                let l = batch_loss(&mut tape, v, tau).unwrap();
                let taped = tape.value(l).item().unwrap();
                max_err = max_err
                    .max((value - expected).abs())
                    .max((taped - expected).abs());
                trials += 1;
            }
        }
    }
    let oracle_ok = max_err <= 1e-6;

    let mut closed = Vec::new();
    let mut closed_ok = true;
    for n in [2usize, 4, 8, 128] {
        let z = Tensor::new(&[2 * n, 4], [0.5f64, -0.5, 0.5, 0.5].repeat(2 * n)).unwrap();
        let got = batch_loss_value(&z, 0.5).unwrap();
        let want = ((2 * n - 2) as f64).ln();
        closed_ok &= (got - want).abs() <= 1e-6;
        closed.push(format!("N={n}: got {got:.6} want log(2N-2)={want:.6}"));
    }
    report(
        2,
        oracle_ok && closed_ok,
        &format!(
            "brute-force oracle: {trials} trials, max abs err {max_err:.1e} ({}); closed form: {}",
            if oracle_ok { "ok" } else { "mismatch" },
            closed.join(", ")
        ),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_metric_oracles() {
    let a1 = accuracy(&ConfusionMatrix {
        tp: 180,
        tn: 176,
        fp: 14,
        fn_: 10,
    });
    let a2 = accuracy(&ConfusionMatrix {
        tp: 200,
        tn: 218,
        fp: 20,
        fn_: 22,
    });
    let acc_ok = (a1 - 0.9368).abs() <= 1e-4 && (a2 - 0.9087).abs() <= 1e-4;

    let mut r = rng(3);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let n = r.gen_range(4..80);
        let mut labels: Vec<Label> = (0..n)
            .map(|_| {
                if r.gen_bool(0.4) {
                    Label::Malignant
                } else {
                    Label::Benign
                }
            })
            .collect();
        labels[0] = Label::Malignant;
        labels[1] = Label::Benign;
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n)
            .map(|_| (r.gen_range(0.0..1.0f64) * 12.0).floor() / 12.0)
            .collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == Label::Malignant).collect();
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        max_err = max_err.max((auc - mann_whitney(&scores, &positive)).abs());
    }
    let auc_ok = max_err <= 1e-9;

    let f = f1(&ConfusionMatrix {
        tp: 50,
        fp: 3,
        fn_: 2,
        tn: 0,
    })
    .value;
    let f1_ok = (f - 0.95238).abs() <= 1e-5;
    report(
        3,
        acc_ok && auc_ok && f1_ok,
        &format!("accuracy {a1:.4} / {a2:.4}; AUC vs Mann-Whitney max err {max_err:.1e} over 100 instances; F1 {f:.5}"),
    );
}

// ---------------------------------------------------------------- 4

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["clmammo"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn criterion_4_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let conf = workspace_root().join("configs/tiny.conf");
    let (data, pre, ft, ev) = (
        dir.path().join("data"),
        dir.path().join("pre"),
        dir.path().join("ft"),
        dir.path().join("eval"),
    );
    let c = p(&conf);
    let steps = [
        cli(&["synth", "--config", c, "--seed", "7", "--out", p(&data)]),
        cli(&[
            "pretrain",
            "--config",
            c,
            "--seed",
            "7",
            "--data",
            p(&data.join("unlabeled")),
            "--out",
            p(&pre),
        ]),
        cli(&[
            "finetune",
            "--config",
            c,
            "--seed",
            "7",
            "--checkpoint",
            p(&pre.join(PRETRAIN_CHECKPOINT)),
            "--data",
            p(&data.join("train")),
            "--out",
            p(&ft),
        ]),
        cli(&[
            "eval",
            "--config",
            c,
            "--seed",
            "7",
            "--checkpoint",
            p(&ft.join(FINETUNE_CHECKPOINT)),
            "--data",
            p(&data.join("eval")),
            "--out",
            p(&ev),
        ]),
    ];
    if steps.iter().any(|&code| code != 0) {
        report(4, false, &format!("CLI exit codes {steps:?}"));
        return;
    }
    let counts = (
        clmammo::data::list_images(&data.join("unlabeled"))
            .unwrap()
            .len(),
        clmammo::data::load_labeled(&data.join("train"))
            .unwrap()
            .len(),
        clmammo::data::load_labeled(&data.join("eval"))
            .unwrap()
            .len(),
    );
    let log = read_epoch_log(&pre.join(PRETRAIN_LOG)).unwrap();
    let ft_epochs = read_epoch_log(&ft.join(FINETUNE_LOG)).unwrap().len();
    let metrics = MetricsReport::read(&ev.join(METRICS_FILE)).unwrap();
    let ratio = log[9].loss / log[0].loss;
    let secs = start.elapsed().as_secs_f64();
    let ok = counts == (256, 128, 64)
        && log.len() == 10
        && ft_epochs == 40
        && ratio <= 0.8
        && metrics.accuracy >= 0.90
        && metrics.auc >= 0.95
        && secs < 600.0;
    report(
        4,
        ok,
        &format!(
            "data {counts:?}; loss epoch 1 {:.4} -> epoch 10 {:.4} (ratio {ratio:.4}); eval accuracy {:.4}, AUC {:.4}; {secs:.0}s",
            log[0].loss, log[9].loss, metrics.accuracy, metrics.auc
        ),
    );
}

// ---------------------------------------------------------------- 5

fn small_pretrain_config(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        model: ModelConfig::new(EncoderConfig::tiny()),
        epochs,
        pairs_per_batch: 8,
        base_lr: Some(0.1),
        lars: LarsConfig {
            trust_coefficient: 0.02,
            ..LarsConfig::default()
        },
        augment: AugmentConfig {
            target_size: 16,
            ..AugmentConfig::default()
        },
        seed: 5,
        ..PretrainConfig::paper()
    }
}

fn bitwise_same(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().all(|(n, p)| {
            let q = b.tensor(n).unwrap();
            p.value.shape() == q.shape()
                && p.value
                    .data()
                    .iter()
                    .zip(q.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn criterion_5_freezing_and_determinism() {
    let spec = SynthDatasetSpec {
        unlabeled: 24,
        labeled: 24,
        image_size: 32,
        ..SynthDatasetSpec::default()
    };
    let data = synth_dataset(&spec, 5).unwrap();
    let cfg = small_pretrain_config(3);
    let dir = tempfile::tempdir().unwrap();

    let (ckpt_a, log_a) = pretrain(&cfg, &data.unlabeled, serde_json::Value::Null).unwrap();
    let (_, log_b) = pretrain(&cfg, &data.unlabeled, serde_json::Value::Null).unwrap();
    write_epoch_log(&dir.path().join("a.csv"), &log_a).unwrap();
    write_epoch_log(&dir.path().join("b.csv"), &log_b).unwrap();
    let pre_csv_same = file_hash(&dir.path().join("a.csv")) == file_hash(&dir.path().join("b.csv"));

    let ft_cfg = FinetuneConfig {
        epochs: 3,
        seed: 5,
        ..FinetuneConfig::default()
    };
    let augment = cfg.augment.clone();
    let mut frozen_ok = true;
    let mut ft_csv_same = true;
    for mode in [FreezeMode::EncoderAll, FreezeMode::AllButLastStage] {
        let c = FinetuneConfig {
            freeze_mode: mode,
            ..ft_cfg.clone()
        };
        let (tuned, log1) = finetune(
            &ckpt_a,
            &cfg.model,
            &c,
            &augment,
            &data.train,
            serde_json::Value::Null,
        )
        .unwrap();
        let (_, log2) = finetune(
            &ckpt_a,
            &cfg.model,
            &c,
            &augment,
            &data.train,
            serde_json::Value::Null,
        )
        .unwrap();
        let trainable = mode.trainable_prefixes();
        let frozen_prefix_ok = ckpt_a.model.params.iter().all(|(n, p)| {
            let trains = trainable.iter().any(|t| n.starts_with(t.as_str()));
            let q = tuned.model.params.tensor(n).unwrap();
            trains
                || p.value
                    .data()
                    .iter()
                    .zip(q.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        frozen_ok &= frozen_prefix_ok;
        let changed = !bitwise_same(&ckpt_a.model.params, &tuned.model.params);
        frozen_ok &= changed;
        write_epoch_log(&dir.path().join("f1.csv"), &log1).unwrap();
        write_epoch_log(&dir.path().join("f2.csv"), &log2).unwrap();
        ft_csv_same &=
            file_hash(&dir.path().join("f1.csv")) == file_hash(&dir.path().join("f2.csv"));
    }

    let mut state = PretrainState::new(&cfg).unwrap();
    let mut resumed_log = pretrain_until(&mut state, &cfg, &data.unlabeled, 1).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&state.checkpoint(&cfg, serde_json::Value::Null), &path).unwrap();
    drop(state);
    let mut state = PretrainState::from_checkpoint(&load_checkpoint(&path).unwrap(), &cfg).unwrap();
    resumed_log.extend(pretrain_until(&mut state, &cfg, &data.unlabeled, 3).unwrap());
    let losses_same = resumed_log.len() == log_a.len()
        && resumed_log
            .iter()
            .zip(&log_a)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits() && x.lr == y.lr);
    let params_same = bitwise_same(&state.model.params, &ckpt_a.model.params);

    report(
        5,
        frozen_ok && pre_csv_same && ft_csv_same && losses_same && params_same,
        &format!(
            "frozen bitwise {frozen_ok}; identical pretrain CSVs {pre_csv_same}; identical finetune CSVs {ft_csv_same}; \
             resume losses {losses_same}, params {params_same}"
        ),
    );
}

// ---------------------------------------------------------------- 6

fn single(kind: ParamKind, values: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(
        "p",
        kind,
        Tensor::new(&[values.len()], values.to_vec()).unwrap(),
    );
    s
}

fn grad(values: &[f32]) -> std::collections::BTreeMap<String, Tensor> {
    [(
        "p".to_string(),
        Tensor::new(&[values.len()], values.to_vec()).unwrap(),
    )]
    .into()
}

#[test]
fn criterion_6_lars() {
    let cfg = LarsConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        trust_coefficient: 1e-3,
        exclude_bias_and_norm: true,
    };
    let mut w = single(ParamKind::DenseWeight, &[2.0]);
    lars_step(&mut w, &grad(&[1.0]), &mut OptimState::default(), 1.0, &cfg).unwrap();
    let scalar = w.tensor("p").unwrap().data()[0];
    let scalar_ok = scalar == 1.998f32;

    let cfg = LarsConfig {
        weight_decay: 0.0,
        ..LarsConfig::default()
    };
    let mut a = single(ParamKind::Bias, &[0.4, -1.3, 2.2, 0.05]);
    let mut b = a.clone();
    let (mut sa, mut sb) = (OptimState::default(), OptimState::default());
    let mut r = rng(6);
    for step in 0..20 {
        let g: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let lr = 0.05 + 0.01 * step as f64;
        lars_step(&mut a, &grad(&g), &mut sa, lr, &cfg).unwrap();
        sgd_step(&mut b, &grad(&g), &mut sb, lr, cfg.momentum).unwrap();
    }
    let bitwise = bitwise_same(&a, &b) && sa == sb;
    report(
        6,
        scalar_ok && bitwise,
        &format!(
            "scalar example w={scalar}; r=1/wd=0 vs SGD-momentum over 20 steps bitwise {bitwise}"
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_gradcam_locality() {
    let s = 32;
    let mut r = rng(7);
    let mut min_mass = f64::INFINITY;
    for _ in 0..10 {
        let img: Vec<f64> = (0..s * s).map(|_| r.gen_range(0.1..1.0)).collect();
        let x = Tensor::new(&[1, 1, s, s], img).unwrap();
        let raw = gradcam_raw(
            &QuadrantNet {
                size: s,
                silent: false,
            },
            &x,
            TargetClass::Class(1),
        )
        .unwrap();
        for mode in [Upsample::Bilinear, Upsample::Nearest] {
            let hm = Heatmap::from_raw(&raw, s, s, mode);
            min_mass = min_mass.min(hm.mass_fraction(0, 0, s / 2, s / 2));
        }
    }
    let x = Tensor::new(&[1, 1, s, s], vec![0.5; s * s]).unwrap();
    let raw = gradcam_raw(
        &QuadrantNet {
            size: s,
            silent: true,
        },
        &x,
        TargetClass::Class(1),
    )
    .unwrap();
    let hm = Heatmap::from_raw(&raw, s, s, Upsample::Bilinear);
    let zero = raw.values.iter().all(|&v| v == 0.0) && hm.values.iter().all(|&v| v == 0.0);
    report(
        7,
        min_mass >= 0.6 && zero,
        &format!(
            "min quadrant mass {min_mass:.4} over 10 images; zero-gradient map all zero {zero}"
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_paper_preset() {
    let cfg = RunConfig::load(&workspace_root().join("configs/paper.conf")).unwrap();
    let pcfg = cfg.pretrain().unwrap();
    let fcfg = cfg.finetune().unwrap();
    let images: Vec<GrayImage> = (0..pcfg.pairs_per_batch)
        .map(|i| GrayImage::filled(48, 48, (i % 10) as f32 / 10.0).unwrap())
        .collect();
    let refs: Vec<&GrayImage> = images.iter().collect();
    let views = make_view_pair_batch(&refs, &pcfg.augment, 0).unwrap();
    let rows = views.views.shape()[0];

    let steps = 100;
    let sched = pcfg.schedule(steps);
    let base = pcfg.resolved_base_lr();
    let warm = sched.warmup_steps;
    let warmup_linear = (0..warm)
        .all(|s| (lr_at(s, &sched).unwrap() - base * (s + 1) as f64 / warm as f64).abs() < 1e-12);
    let mid = warm + (sched.total_steps - warm) / 2;
    let cosine = (lr_at(warm, &sched).unwrap() - base).abs() < 1e-12
        && (lr_at(mid, &sched).unwrap() - 0.5 * base).abs() < 1e-9
        && lr_at(sched.total_steps, &sched).unwrap().abs() < 1e-12;
    let lars = pcfg.lars == LarsConfig::default() && pcfg.lars.trust_coefficient > 0.0;

    let model = Model::build(pcfg.model.clone(), 0).unwrap();
    let hidden = model
        .params
        .tensor("projection.fc1.weight")
        .unwrap()
        .shape()
        .to_vec();
    let out = model
        .params
        .tensor("projection.fc2.weight")
        .unwrap()
        .shape()
        .to_vec();
    let stages = pcfg.model.encoder.stage_blocks;

    let start = Instant::now();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(Binding::train_all());
    let x = tape.constant(views.views.slice_rows(0, 2).unwrap());
    let h = model.encode(&mut tape, &mut ctx, x).unwrap();
    let z = model.project(&mut tape, &mut ctx, h).unwrap();
    let loss = batch_loss(&mut tape, z, pcfg.tau).unwrap();
    let grads = tape.backward(loss).unwrap();
    let all_grads = ctx
        .bound
        .values()
        .all(|&v| grads.get(v).map_or(false, |g| g.is_finite()));
    let step_secs = start.elapsed().as_secs_f64();

    let ok = pcfg.pairs_per_batch == 128
        && rows == 256
        && pcfg.tau == 0.5
        && lars
        && warm > 0
        && warmup_linear
        && cosine
        && pcfg.epochs == 60
        && fcfg.epochs == 40
        && hidden == [2048, 2048]
        && out == [2048, 128]
        && stages == [3, 4, 6, 3]
        && all_grads;
    report(
        8,
        ok,
        &format!(
            "N={} ({rows} rows), tau={}, LARS {lars}, warmup {warm}/{} linear {warmup_linear} cosine {cosine}, \
             epochs {}/{}, heads {hidden:?}->{out:?}, stages {stages:?}, 32x32 forward/backward {step_secs:.1}s grads {all_grads}",
            pcfg.pairs_per_batch, pcfg.tau, sched.total_steps, pcfg.epochs, fcfg.epochs
        ),
    );
}
