mod common;

use clmammo::augment::{augment_view, resize, AugmentConfig};
use clmammo::data::{
    class_counts, split, synth_generate, GrayImage, Label, LabeledSample, SynthSpec,
};
use clmammo::metrics::roc_auc;
use clmammo::model::{EncoderConfig, Model, ModelConfig};
use clmammo::optim::{lr_at, ScheduleConfig};
use clmammo::train::{embed_images, evaluate, finetune, pretrain, FinetuneConfig, PretrainConfig};
use clmammo::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn samples(n: usize, size: usize, seed: u64) -> Vec<LabeledSample> {
    synth_generate(&SynthSpec {
        n,
        image_size: size,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt().max(1e-300)
}

fn tiny_augment() -> AugmentConfig {
    AugmentConfig {
        target_size: 16,
        ..Default::default()
    }
}

#[test]
fn views_correlate_with_their_own_source() {
    let cfg = AugmentConfig {
        target_size: 32,
        ..Default::default()
    };
    let data = samples(100, 64, 3);
    let mut rng = common::rng(11);
    let sources: Vec<GrayImage> = data
        .iter()
        .map(|s| resize(&s.image, 32, 32).unwrap())
        .collect();
    let views: Vec<[GrayImage; 2]> = data
        .iter()
        .map(|s| {
            [
                augment_view(&s.image, &cfg, &mut rng).unwrap(),
                augment_view(&s.image, &cfg, &mut rng).unwrap(),
            ]
        })
        .collect();
    let (mut own, mut other, mut differ) = (0.0, 0.0, 0);
    for (k, pair) in views.iter().enumerate() {
        if pair[0] != pair[1] {
            differ += 1;
        }
        let next = &sources[(k + 1) % sources.len()];
        for v in pair {
            own += pearson(v.pixels(), sources[k].pixels());
            other += pearson(v.pixels(), next.pixels());
        }
    }
    let (own, other) = (own / 200.0, other / 200.0);
    assert_eq!(differ, 100);
    assert!(own > other, "own {own} vs other {other}");
}

#[test]
fn split_seed_changes_membership_not_counts() {
    let data = samples(60, 16, 1);
    let (a_train, a_eval) = split(&data, [2.0 / 3.0, 1.0 / 3.0], 1).unwrap();
    let (b_train, b_eval) = split(&data, [2.0 / 3.0, 1.0 / 3.0], 2).unwrap();
    assert_eq!(class_counts(&a_train), class_counts(&b_train));
    assert_eq!(class_counts(&a_eval), class_counts(&b_eval));
    assert_eq!(class_counts(&a_train), [20, 20]);
    assert_ne!(a_train, b_train);
}

/// Bright images are malignant, dark ones benign; the head separates the
/// class means of the encoder features.
fn oracle_classifier() -> (Model, Vec<LabeledSample>) {
    let aug = tiny_augment();
    let mut model = Model::build(ModelConfig::new(EncoderConfig::tiny()), 4).unwrap();
    let data: Vec<LabeledSample> = (0..16)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Benign
            } else {
                Label::Malignant
            };
            let level = if label == Label::Benign { 0.1 } else { 0.9 } + 0.005 * i as f32;
            LabeledSample::new(GrayImage::filled(20, 20, level).unwrap(), label)
        })
        .collect();
    let images: Vec<&GrayImage> = data.iter().map(|s| &s.image).collect();
    let feats = embed_images(&model, &images, &aug).unwrap();
    let dim = model.feature_dim();
    let mut mean = [vec![0f32; dim], vec![0f32; dim]];
    for (row, s) in feats.data().chunks(dim).zip(&data) {
        for (m, &f) in mean[s.label.index()].iter_mut().zip(row) {
            *m += f / 8.0;
        }
    }
    let mut w = vec![0f32; dim * 2];
    let mut bias = 0f32;
    for j in 0..dim {
        let d = mean[1][j] - mean[0][j];
        w[j * 2 + 1] = d;
        bias -= d * (mean[0][j] + mean[1][j]) / 2.0;
    }
    model.params.get_mut("classifier.fc.weight").unwrap().value =
        Tensor::new(&[dim, 2], w).unwrap();
    model.params.get_mut("classifier.fc.bias").unwrap().value =
        Tensor::new(&[2], vec![0.0, bias]).unwrap();
    (model, data)
}

#[test]
fn oracle_classifier_scores_perfectly() {
    let (model, data) = oracle_classifier();
    let (report, rows) = evaluate(&model, &data, &tiny_augment()).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.auc, 1.0);
    assert_eq!(report.f1, 1.0);
    assert!(rows
        .iter()
        .zip(&data)
        .all(|(r, s)| r.label == s.label.index()));
}

#[test]
fn shuffled_labels_give_chance_auc() {
    let model = Model::build(ModelConfig::new(EncoderConfig::tiny()), 8).unwrap();
    let data = samples(96, 24, 9);
    let (_, rows) = evaluate(&model, &data, &tiny_augment()).unwrap();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let mut labels: Vec<Label> = data.iter().map(|s| s.label).collect();
    let mut rng = common::rng(21);
    let mut total = 0.0;
    for _ in 0..20 {
        labels.shuffle(&mut rng);
        let auc = roc_auc(&scores, &labels).unwrap().1;
        assert!((0.0..=1.0).contains(&auc));
        total += auc;
    }
    let mean = total / 20.0;
    assert!((0.4..=0.6).contains(&mean), "mean shuffled auc {mean}");
}

#[test]
fn every_epoch_is_logged_once() {
    let cfg = PretrainConfig {
        model: ModelConfig::new(EncoderConfig::tiny()),
        epochs: 3,
        pairs_per_batch: 4,
        augment: tiny_augment(),
        seed: 2,
        ..PretrainConfig::paper()
    };
    let data = samples(12, 24, 5);
    let images: Vec<GrayImage> = data.iter().map(|s| s.image.clone()).collect();
    let (ckpt, log) = pretrain(&cfg, &images, serde_json::Value::Null).unwrap();
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(log.iter().all(|r| r.loss.is_finite()));

    let ft = FinetuneConfig {
        epochs: 4,
        batch_size: 5,
        ..Default::default()
    };
    let (_, log) = finetune(
        &ckpt,
        &cfg.model,
        &ft,
        &cfg.augment,
        &data,
        serde_json::Value::Null,
    )
    .unwrap();
    assert_eq!(
        log.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        [1, 2, 3, 4]
    );
    assert!(log
        .iter()
        .all(|r| r.loss.is_finite() && r.accuracy.is_some_and(|a| (0.0..=1.0).contains(&a))));
}

proptest! {
    #[test]
    fn learning_rate_is_continuous_and_non_negative(
        warmup in 1usize..50,
        extra in 2usize..500,
        base in 0.001f64..5.0,
        final_frac in 0.0f64..1.0,
    ) {
        let cfg = ScheduleConfig {
            warmup_steps: warmup,
            total_steps: warmup + extra,
            base_lr: base,
            final_lr: base * final_frac,
        };
        let lrs: Vec<f64> = (0..=cfg.total_steps).map(|s| lr_at(s, &cfg).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&l| l >= 0.0));
        // the last warmup step reaches base_lr and the first cosine step starts there
        prop_assert!((lrs[warmup - 1] - base).abs() < 1e-12 * base);
        prop_assert!((lrs[warmup] - base).abs() < 1e-12 * base);
        let max_jump = lrs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        let bound = base / warmup as f64 + std::f64::consts::PI * base / (2.0 * extra as f64);
        prop_assert!(max_jump <= bound * (1.0 + 1e-9), "{max_jump} > {bound}");
    }
}
