//! Shared oracles and helpers for the integration tests.
#![allow(dead_code)]

use clmammo::explain::ActivationCapture;
use clmammo::tensor::{Tape, Tensor, Var};
use clmammo::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Result of a central-difference comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel: self.max_rel.max(other.max_rel),
            checked: self.checked + other.checked,
        }
    }
}

/// Central-difference settings. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`; `floor` sits well above the rounding
/// noise `eps * |loss| / step` of the difference quotient.
#[derive(Debug, Clone, Copy)]
pub struct Fd {
    pub step: f64,
    pub floor: f64,
}

/// Single operations: small losses, few kinks.
pub const OP_FD: Fd = Fd {
    step: 1e-6,
    floor: 1e-5,
};
/// Whole networks: many ReLUs put a kink within reach of larger steps, and
/// the smaller step raises the rounding noise to a few 1e-9.
pub const NET_FD: Fd = Fd {
    step: 1e-7,
    floor: 1e-3,
};

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare tape gradients of a scalar-valued graph with central differences.
///
/// `build` receives one leaf per input (all requiring grad) and returns a
/// scalar. At most `per_input` elements of each input are perturbed; pass
/// `usize::MAX` to check every element.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    per_input: usize,
    fd: Fd,
    seed: u64,
) -> GradCheck {
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut r = rng(seed);
    let mut result = GradCheck::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| inputs[k].zeros_like());
        let n = inputs[k].numel();
        let picks: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| r.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + fd.step;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - fd.step;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * fd.step);
            let e = rel_err(analytic.data()[i], numeric, fd.floor);
            result.max_rel = result.max_rel.max(e);
            result.checked += 1;
        }
    }
    result
}

/// Weighted sum `sum(out * w)` with fixed random weights, so every output
/// element reaches the loss with a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random_tensor(&mut rng(seed), &shape));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Rows scaled to unit length.
pub fn unit_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let d = t.shape()[1];
    let data = t
        .data()
        .chunks(d)
        .flat_map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(move |v| v / n)
        })
        .collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Brute-force NT-Xent: rows `2k`, `2k+1` are positives; each anchor's
/// denominator runs over every other row; the result is the mean over all
/// `2N` anchors.
pub fn nt_xent_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let cos = |i: usize, j: usize| {
        dot(&z[i], &z[j]) / (dot(&z[i], &z[i]).sqrt() * dot(&z[j], &z[j]).sqrt())
    };
    let mut total = 0.0;
    for i in 0..m {
        let j = i ^ 1;
        let num = (cos(i, j) / tau).exp();
        let den: f64 = (0..m)
            .filter(|&k| k != i)
            .map(|k| (cos(i, k) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total / m as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Network whose class-1 logit depends only on the top-left quadrant of the
/// input, while class 0 reads the whole image. Channel 0 is active in the
/// top-left quadrant, channel 1 everywhere. Class 1 has a zero row in
/// `silent`, giving an identically zero gradient.
pub struct QuadrantNet {
    pub size: usize,
    pub silent: bool,
}

impl QuadrantNet {
    fn masks(&self) -> Tensor<f64> {
        let s = self.size;
        let mut data = vec![0.0; 2 * s * s];
        for y in 0..s {
            for x in 0..s {
                if y < s / 2 && x < s / 2 {
                    data[y * s + x] = 1.0;
                }
                data[s * s + y * s + x] = 1.0;
            }
        }
        Tensor::new(&[1, 2, s, s], data).unwrap()
    }
}

impl ActivationCapture<f64> for QuadrantNet {
    fn capture(&self, tape: &mut Tape<f64>, input: Var) -> Result<(Var, Var)> {
        // 1x1 conv copies the input to two channels, masks select regions.
        let k = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 1.0])?);
        let c = tape.conv2d(input, k, 1, 0)?;
        let m = tape.constant(self.masks());
        let masked = tape.mul(c, m)?;
        let acts = tape.max_pool2d(masked, 2, 2, 0)?;
        tape.watch(acts);
        let pooled = tape.global_avg_pool(acts)?;
        let w1 = if self.silent { 0.0 } else { 4.0 };
        let w = tape.constant(Tensor::new(&[2, 2], vec![0.0, w1, 1.0, 0.0])?);
        let logits = tape.matmul(pooled, w)?;
        Ok((logits, acts))
    }
}

/// FNV-1a over a file's bytes.
pub fn file_hash(path: &std::path::Path) -> u64 {
    std::fs::read(path)
        .unwrap()
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
}
