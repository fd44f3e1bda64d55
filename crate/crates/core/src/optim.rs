//! LARS and momentum SGD over named parameters, plus the linear-warmup /
//! cosine-decay learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LarsConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    /// Skip weight decay and trust scaling for biases and batch-norm affines.
    pub exclude_bias_and_norm: bool,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 1e-3,
            exclude_bias_and_norm: true,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.trust_coefficient > 0.0) {
            return Err(Error::Config(format!(
                "LARS momentum/weight decay must be >= 0 and trust coefficient > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub final_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup steps {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr >= 0.0 && self.final_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` in `0..=total_steps`: linear warmup reaching
/// `base_lr` at the end of warmup, then half-cosine down to `final_lr`.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} beyond schedule of {} steps",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.final_lr + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Per-parameter momentum buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub velocity: BTreeMap<String, Tensor>,
}

fn check_grads(params: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.kind.is_buffer() {
            return Err(Error::InvalidInput(format!(
                "{name} is a buffer, not a trainable parameter"
            )));
        }
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

fn velocity_for<'a>(
    state: &'a mut OptimState,
    name: &str,
    like: &Tensor,
) -> Result<&'a mut Tensor> {
    let v = state
        .velocity
        .entry(name.to_string())
        .or_insert_with(|| like.zeros_like());
    if v.shape() != like.shape() {
        return Err(Error::Shape(format!(
            "momentum buffer for {name} has shape {:?}",
            v.shape()
        )));
    }
    Ok(v)
}

/// Trust ratio `eta * |w| / |g + wd w|`, or 1 when either norm vanishes.
pub fn trust_ratio(w: &[f32], g_eff: &[f32], trust_coefficient: f64) -> f64 {
    let wn = l2_norm(w) as f64;
    let gn = l2_norm(g_eff) as f64;
    if wn > 0.0 && gn > 0.0 {
        trust_coefficient * wn / gn
    } else {
        1.0
    }
}

/// One update of a single tensor: `g' = g + wd w`, `r = trust ratio`,
/// `v <- m v + r g'`, `w <- w - lr v`. Excluded tensors use `r = 1`, no decay.
pub fn lars_update(
    w: &mut [f32],
    g: &[f32],
    v: &mut [f32],
    lr: f64,
    cfg: &LarsConfig,
    excluded: bool,
) {
    let (wd, ratio) = if excluded {
        (0.0f32, 1.0f32)
    } else {
        let wd = cfg.weight_decay as f32;
        let g_eff: Vec<f32> = g
            .iter()
            .zip(w.iter())
            .map(|(&gi, &wi)| gi + wd * wi)
            .collect();
        (wd, trust_ratio(w, &g_eff, cfg.trust_coefficient) as f32)
    };
    let (m, lr) = (cfg.momentum as f32, lr as f32);
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let g_eff = gi + wd * *wi;
        *vi = m * *vi + ratio * g_eff;
        *wi -= lr * *vi;
    }
}

/// `v <- m v + g`, `w <- w - lr v`.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, momentum: f64) {
    let (m, lr) = (momentum as f32, lr as f32);
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = m * *vi + gi;
        *wi -= lr * *vi;
    }
}

/// LARS over every parameter that has a gradient. Nothing is modified when
/// any gradient is non-finite.
pub fn lars_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    cfg: &LarsConfig,
) -> Result<()> {
    cfg.validate()?;
    check_grads(params, grads)?;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let excluded = cfg.exclude_bias_and_norm && p.kind.is_lars_excluded();
        let v = velocity_for(state, name, &p.value)?;
        lars_update(
            p.value.data_mut(),
            g.data(),
            v.data_mut(),
            lr,
            cfg,
            excluded,
        );
    }
    Ok(())
}

/// Momentum SGD over every parameter that has a gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(momentum >= 0.0) {
        return Err(Error::Config(format!("momentum {momentum} must be >= 0")));
    }
    check_grads(params, grads)?;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let v = velocity_for(state, name, &p.value)?;
        sgd_update(p.value.data_mut(), g.data(), v.data_mut(), lr, momentum);
    }
    Ok(())
}

/// Whether LARS treats a parameter kind as excluded.
pub fn is_excluded(kind: ParamKind, cfg: &LarsConfig) -> bool {
    cfg.exclude_bias_and_norm && kind.is_lars_excluded()
}
