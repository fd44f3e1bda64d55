//! Residual bottleneck encoder with a projection head (contrastive phase) and
//! a linear classifier head (probing phase).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, substream};
use crate::tensor::{conv_out_dim, BnMode, BnStats, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.1;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub width: usize,
    /// 3x3 stride-2 max pool after the stem; identity when false.
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stem: StemConfig,
    pub stage_blocks: [usize; 4],
    pub stage_widths: [usize; 4],
    pub expansion: usize,
}

impl EncoderConfig {
    /// Four stages of [3,4,6,3] bottlenecks with the small-image stem
    /// (3x3 stride-1 convolution, no max pool): 2048-d features.
    pub fn paper() -> Self {
        Self {
            stem: StemConfig {
                kernel: 3,
                stride: 1,
                width: 64,
                max_pool: false,
            },
            stage_blocks: [3, 4, 6, 3],
            stage_widths: [64, 128, 256, 512],
            expansion: 4,
        }
    }

    /// The [3,4,6,3] encoder with the large-image stem (7x7 stride 2 + max pool).
    pub fn full() -> Self {
        Self {
            stem: StemConfig {
                kernel: 7,
                stride: 2,
                width: 64,
                max_pool: true,
            },
            ..Self::paper()
        }
    }

    /// One block per stage, narrow widths: 256-d features.
    pub fn tiny() -> Self {
        Self {
            stem: StemConfig {
                kernel: 3,
                stride: 1,
                width: 8,
                max_pool: false,
            },
            stage_blocks: [1, 1, 1, 1],
            stage_widths: [8, 16, 32, 64],
            expansion: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown encoder preset {other:?} (expected paper, full or tiny)"
            ))),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_widths[3] * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stem;
        if s.kernel == 0 || s.stride == 0 || s.width == 0 {
            return Err(Error::Config(
                "stem kernel, stride and width must be positive".into(),
            ));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config(format!(
                "stage block counts {:?} must all be >= 1",
                self.stage_blocks
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) || self.expansion == 0 {
            return Err(Error::Config(
                "stage widths and expansion must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// Spatial extent of the last stage for a square input, or an error if
    /// the input is too small for the stride chain.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let err = || Error::Shape(format!("input size {input} is too small for this encoder"));
        let s = &self.stem;
        let mut size = conv_out_dim(input, s.kernel, s.stride, s.kernel / 2).ok_or_else(err)?;
        if s.max_pool {
            size = conv_out_dim(size, 3, 2, 1).ok_or_else(err)?;
        }
        for _ in 1..4 {
            size = conv_out_dim(size, 3, 2, 1).ok_or_else(err)?;
        }
        Ok(size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Projection hidden width; `0` means "same as the feature dimension".
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            projection_hidden: 0,
            projection_dim: 128,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        if self.projection_hidden == 0 {
            self.encoder.feature_dim()
        } else {
            self.projection_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.projection_dim == 0 {
            return Err(Error::Config(
                "projection dimension must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable architecture identifier: FNV-1a over a canonical description.
    pub fn fingerprint(&self) -> String {
        let e = &self.encoder;
        let canon = format!(
            "stem:k{}s{}w{}p{}|blocks:{:?}|widths:{:?}|exp:{}|proj:{}-{}-{}|cls:{}",
            e.stem.kernel,
            e.stem.stride,
            e.stem.width,
            u8::from(e.stem.max_pool),
            e.stage_blocks,
            e.stage_widths,
            e.expansion,
            e.feature_dim(),
            self.hidden_dim(),
            self.projection_dim,
            NUM_CLASSES
        );
        let hash = canon.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        });
        format!("{hash:016x}")
    }
}

/// Role of a named tensor; drives initialization and optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    DenseWeight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Biases and normalization affines skip weight decay and trust scaling.
    pub fn is_lars_excluded(self) -> bool {
        matches!(
            self,
            ParamKind::Bias | ParamKind::BnGamma | ParamKind::BnBeta
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named tensors of a model, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) {
        self.params.insert(name.into(), Param { kind, value });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    /// Number of trainable scalars (buffers excluded) under `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| k.starts_with(prefix) && !p.kind.is_buffer())
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            kind: p.kind,
                            value: p.value.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Fold observed batch statistics into running averages.
    pub fn apply_bn_stats(&mut self, updates: &[(String, BnStats<T>)]) -> Result<()> {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (prefix, stats) in updates {
            for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let buf = self.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &f) in buf.value.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = keep * *r + m * f;
                }
            }
        }
        Ok(())
    }
}

/// Shape and kind of every tensor the architecture defines, in build order.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, ParamKind, Vec<usize>)> {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<_>, name: String, f: usize, c: usize, k: usize| {
        specs.push((
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            vec![f, c, k, k],
        ));
    };
    let bn = |specs: &mut Vec<(String, ParamKind, Vec<usize>)>, name: String, c: usize| {
        specs.push((format!("{name}.gamma"), ParamKind::BnGamma, vec![c]));
        specs.push((format!("{name}.beta"), ParamKind::BnBeta, vec![c]));
        specs.push((
            format!("{name}.running_mean"),
            ParamKind::RunningMean,
            vec![c],
        ));
        specs.push((
            format!("{name}.running_var"),
            ParamKind::RunningVar,
            vec![c],
        ));
    };
    let e = &config.encoder;
    conv(
        &mut specs,
        "encoder.stem.conv".into(),
        e.stem.width,
        1,
        e.stem.kernel,
    );
    bn(&mut specs, "encoder.stem.bn".into(), e.stem.width);
    let mut in_ch = e.stem.width;
    for (s, (&blocks, &width)) in e.stage_blocks.iter().zip(&e.stage_widths).enumerate() {
        let out = width * e.expansion;
        for b in 0..blocks {
            let p = block_prefix(s, b);
            conv(&mut specs, format!("{p}.conv1"), width, in_ch, 1);
            bn(&mut specs, format!("{p}.bn1"), width);
            conv(&mut specs, format!("{p}.conv2"), width, width, 3);
            bn(&mut specs, format!("{p}.bn2"), width);
            conv(&mut specs, format!("{p}.conv3"), out, width, 1);
            bn(&mut specs, format!("{p}.bn3"), out);
            if block_stride(s, b) != 1 || in_ch != out {
                conv(&mut specs, format!("{p}.downsample.conv"), out, in_ch, 1);
                bn(&mut specs, format!("{p}.downsample.bn"), out);
            }
            in_ch = out;
        }
    }
    let (feat, hidden, proj) = (e.feature_dim(), config.hidden_dim(), config.projection_dim);
    for (name, i, o) in [
        ("projection.fc1", feat, hidden),
        ("projection.fc2", hidden, proj),
    ] {
        specs.push((format!("{name}.weight"), ParamKind::DenseWeight, vec![i, o]));
        specs.push((format!("{name}.bias"), ParamKind::Bias, vec![o]));
    }
    specs.extend(classifier_specs(feat));
    specs
}

fn classifier_specs(feat: usize) -> Vec<(String, ParamKind, Vec<usize>)> {
    vec![
        (
            "classifier.fc.weight".into(),
            ParamKind::DenseWeight,
            vec![feat, NUM_CLASSES],
        ),
        (
            "classifier.fc.bias".into(),
            ParamKind::Bias,
            vec![NUM_CLASSES],
        ),
    ]
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("encoder.stage{}.block{}", stage + 1, block + 1)
}

/// Prefix shared by every parameter of residual stage `stage` (1-based).
pub fn stage_prefix(stage: usize) -> String {
    format!("encoder.stage{stage}.")
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

fn init_tensor<R: Rng>(kind: ParamKind, shape: &[usize], rng: &mut R) -> Tensor {
    match kind {
        ParamKind::ConvWeight | ParamKind::DenseWeight => {
            let fan_in: usize = match kind {
                ParamKind::ConvWeight => shape[1..].iter().product(),
                _ => shape[0],
            };
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape, data).expect("spec shape")
        }
        ParamKind::BnGamma | ParamKind::RunningVar => Tensor::ones(shape),
        ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => Tensor::zeros(shape),
    }
}

/// Which parameters are trainable and which batch norms use batch statistics.
/// Both are prefix lists; an empty string matches everything.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    pub trainable: Vec<String>,
    pub bn_train: Vec<String>,
}

impl Binding {
    pub fn train_all() -> Self {
        Self {
            trainable: vec![String::new()],
            bn_train: vec![String::new()],
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn bn_trains(&self, name: &str) -> bool {
        self.bn_train.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Per-forward state: which tape variable each parameter was bound to and
/// the batch statistics observed by training-mode batch norms.
pub struct ForwardCtx<T: Scalar = f32> {
    pub binding: Binding,
    pub bound: BTreeMap<String, Var>,
    pub bn_stats: Vec<(String, BnStats<T>)>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn new(binding: Binding) -> Self {
        Self {
            binding,
            bound: BTreeMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Binding::eval())
    }
}

/// Architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl Model<f32> {
    /// He-uniform convolution/dense weights, unit BN scale, zero shifts.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, &[purpose::INIT]);
        let mut params = ParamStore::new();
        for (name, kind, shape) in param_specs(&config) {
            let value = init_tensor(kind, &shape, &mut rng);
            params.insert(name, kind, value);
        }
        Ok(Self { config, params })
    }

    /// Replace the classifier head with a freshly initialized one.
    pub fn reset_classifier(&mut self, seed: u64) {
        let mut rng = substream(seed, &[purpose::HEAD]);
        for (name, kind, shape) in classifier_specs(self.config.encoder.feature_dim()) {
            let value = init_tensor(kind, &shape, &mut rng);
            self.params.insert(name, kind, value);
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.encoder.feature_dim()
    }

    fn bind(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<T>, name: &str) -> Result<Var> {
        if let Some(&v) = ctx.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.tensor(name)?.clone();
        let var = if ctx.binding.is_trainable(name) {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        ctx.bound.insert(name.to_string(), var);
        Ok(var)
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<T>,
        x: Var,
        name: &str,
        stride: usize,
    ) -> Result<Var> {
        let k = self.bind(tape, ctx, &format!("{name}.weight"))?;
        let ksize = tape.value(k).shape()[2];
        tape.conv2d(x, k, stride, ksize / 2)
    }

    fn bn(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.bind(tape, ctx, &format!("{name}.gamma"))?;
        let beta = self.bind(tape, ctx, &format!("{name}.beta"))?;
        let eps = T::from_f64_lossy(BN_EPS);
        if ctx.binding.bn_trains(name) {
            let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Train { eps })?;
            ctx.bn_stats
                .push((name.to_string(), stats.expect("train mode stats")));
            Ok(y)
        } else {
            let mean = self.params.tensor(&format!("{name}.running_mean"))?;
            let var = self.params.tensor(&format!("{name}.running_var"))?;
            let mode = BnMode::Eval {
                mean: mean.data(),
                var: var.data(),
                eps,
            };
            Ok(tape.batch_norm(x, gamma, beta, mode)?.0)
        }
    }

    fn dense(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<T>,
        x: Var,
        name: &str,
    ) -> Result<Var> {
        let w = self.bind(tape, ctx, &format!("{name}.weight"))?;
        let b = self.bind(tape, ctx, &format!("{name}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn check_input(&self, tape: &Tape<T>, input: Var) -> Result<()> {
        match tape.value(input).shape() {
            [_, 1, h, w] if h == w => self.config.encoder.output_size(*h).map(|_| ()),
            s => Err(Error::Shape(format!(
                "encoder expects [B,1,S,S] input, got {s:?}"
            ))),
        }
    }

    /// Stem and the first `stages` residual stages (0..=4).
    pub fn encode_through(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<T>,
        input: Var,
        stages: usize,
    ) -> Result<Var> {
        self.check_input(tape, input)?;
        let e = &self.config.encoder;
        let mut x = self.conv(tape, ctx, input, "encoder.stem.conv", e.stem.stride)?;
        x = self.bn(tape, ctx, x, "encoder.stem.bn")?;
        x = tape.relu(x);
        if e.stem.max_pool {
            x = tape.max_pool2d(x, 3, 2, 1)?;
        }
        self.run_stages(tape, ctx, x, 0, stages)
    }

    /// Residual stages `from..to` (0-based) applied to `x`.
    pub fn run_stages(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<T>,
        mut x: Var,
        from: usize,
        to: usize,
    ) -> Result<Var> {
        let e = &self.config.encoder;
        for s in from..to.min(4) {
            for b in 0..e.stage_blocks[s] {
                x = self.bottleneck(tape, ctx, x, s, b)?;
            }
        }
        Ok(x)
    }

    fn bottleneck(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<T>,
        x: Var,
        s: usize,
        b: usize,
    ) -> Result<Var> {
        let p = block_prefix(s, b);
        let stride = block_stride(s, b);
        let mut y = self.conv(tape, ctx, x, &format!("{p}.conv1"), 1)?;
        y = self.bn(tape, ctx, y, &format!("{p}.bn1"))?;
        y = tape.relu(y);
        y = self.conv(tape, ctx, y, &format!("{p}.conv2"), stride)?;
        y = self.bn(tape, ctx, y, &format!("{p}.bn2"))?;
        y = tape.relu(y);
        y = self.conv(tape, ctx, y, &format!("{p}.conv3"), 1)?;
        y = self.bn(tape, ctx, y, &format!("{p}.bn3"))?;
        let skip = if self
            .params
            .get(&format!("{p}.downsample.conv.weight"))
            .is_ok()
        {
            let z = self.conv(tape, ctx, x, &format!("{p}.downsample.conv"), stride)?;
            self.bn(tape, ctx, z, &format!("{p}.downsample.bn"))?
        } else {
            x
        };
        let sum = tape.add(y, skip)?;
        Ok(tape.relu(sum))
    }

    /// Pooled features `h` of shape `[B, feature_dim]`.
    pub fn encode(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<T>, input: Var) -> Result<Var> {
        let a = self.encode_through(tape, ctx, input, 4)?;
        tape.global_avg_pool(a)
    }

    /// Unit-norm projections `z` of shape `[B, projection_dim]`.
    pub fn project(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<T>, h: Var) -> Result<Var> {
        let mut z = self.dense(tape, ctx, h, "projection.fc1")?;
        z = tape.relu(z);
        z = self.dense(tape, ctx, z, "projection.fc2")?;
        tape.l2_normalize(z)
    }

    /// Class logits `[B, 2]`.
    pub fn classify(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<T>, h: Var) -> Result<Var> {
        self.dense(tape, ctx, h, "classifier.fc")
    }

    /// Logits from last-stage activations: pool then classify.
    pub fn logits_from_activations(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<T>,
        a: Var,
    ) -> Result<Var> {
        let h = tape.global_avg_pool(a)?;
        self.classify(tape, ctx, h)
    }

    /// Logits plus the last-stage activation map, whose gradient is retained
    /// by `backward`.
    pub fn forward_with_capture(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ForwardCtx<T>,
        input: Var,
    ) -> Result<(Var, Var)> {
        let a = self.encode_through(tape, ctx, input, 4)?;
        tape.watch(a);
        let logits = self.logits_from_activations(tape, ctx, a)?;
        Ok((logits, a))
    }

    /// Eval-mode features for a `[B,1,S,S]` batch, processed in chunks.
    pub fn embed(&self, batch: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let rows = batch.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < rows {
            let end = (start + chunk.max(1)).min(rows);
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::eval();
            let x = tape.constant(batch.slice_rows(start, end)?);
            let h = self.encode(&mut tape, &mut ctx, x)?;
            parts.push(tape.value(h).clone());
            start = end;
        }
        Tensor::concat_rows(&parts)
    }

    /// Eval-mode logits for a `[B,1,S,S]` batch.
    pub fn predict_logits(&self, batch: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let feats = self.embed(batch, chunk)?;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let h = tape.constant(feats);
        let logits = self.classify(&mut tape, &mut ctx, h)?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent parameter count: per-layer shape arithmetic.
    fn audit_count(e: &EncoderConfig, hidden: usize, proj: usize) -> usize {
        let bn = |c: usize| 2 * c;
        let mut total = e.stem.width * e.stem.kernel * e.stem.kernel + bn(e.stem.width);
        let mut in_ch = e.stem.width;
        for s in 0..4 {
            let w = e.stage_widths[s];
            let out = w * e.expansion;
            for b in 0..e.stage_blocks[s] {
                total += in_ch * w + bn(w);
                total += 9 * w * w + bn(w);
                total += w * out + bn(out);
                if b == 0 {
                    total += in_ch * out + bn(out);
                }
                in_ch = out;
            }
        }
        let feat = e.feature_dim();
        total + feat * hidden + hidden + hidden * proj + proj + feat * 2 + 2
    }

    #[test]
    fn paper_preset_geometry() {
        let cfg = ModelConfig::new(EncoderConfig::paper());
        assert_eq!(cfg.encoder.total_blocks(), 16);
        assert_eq!(cfg.encoder.feature_dim(), 2048);
        assert_eq!(cfg.hidden_dim(), 2048);
        let specs = param_specs(&cfg);
        let trainable: usize = specs
            .iter()
            .filter(|(_, k, _)| !k.is_buffer())
            .map(|(_, _, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(trainable, audit_count(&cfg.encoder, 2048, 128));
    }

    #[test]
    fn tiny_preset_geometry() {
        let cfg = ModelConfig::new(EncoderConfig::tiny());
        assert_eq!(cfg.encoder.feature_dim(), 256);
        let m = Model::build(cfg.clone(), 1).unwrap();
        assert_eq!(
            m.params.count_trainable(""),
            audit_count(&cfg.encoder, 256, 128)
        );
    }

    #[test]
    fn build_is_deterministic_and_validates() {
        let cfg = ModelConfig::new(EncoderConfig::tiny());
        assert_eq!(
            Model::build(cfg.clone(), 3).unwrap(),
            Model::build(cfg.clone(), 3).unwrap()
        );
        assert_ne!(
            Model::build(cfg.clone(), 3).unwrap(),
            Model::build(cfg, 4).unwrap()
        );
        let mut bad = EncoderConfig::tiny();
        bad.stage_blocks[2] = 0;
        assert!(Model::build(ModelConfig::new(bad), 0).is_err());
    }

    #[test]
    fn fingerprints_distinguish_presets() {
        let a = ModelConfig::new(EncoderConfig::tiny()).fingerprint();
        let b = ModelConfig::new(EncoderConfig::paper()).fingerprint();
        assert_ne!(a, b);
        assert_eq!(a, ModelConfig::new(EncoderConfig::tiny()).fingerprint());
    }

    #[test]
    fn spatial_size_checks() {
        let e = EncoderConfig::tiny();
        assert_eq!(e.output_size(32).unwrap(), 4);
        assert_eq!(EncoderConfig::full().output_size(32).unwrap(), 1);
        let m = Model::build(ModelConfig::new(e), 0).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 8]));
        assert!(m.encode(&mut tape, &mut ctx, x).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(m.encode(&mut tape, &mut ctx, x).is_err());
    }
}
