use super::kernels::{col2im, conv_out_dim, gemm, im2col};
use super::{dims2, dims4, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the tape.
///
/// `backward` receives the upstream gradient, the input values and the
/// forward output, and returns one optional gradient per input.
pub trait Function<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Relu(a) | Op::GlobalAvgPool(a) => {
                vec![*a]
            }
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::MaxPool2d { input, .. } | Op::L2Normalize { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
}

/// Batch-norm normalization mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train { eps: T },
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the estimator tracked by running statistics.
    pub var: Vec<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every input precedes its consumers.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Keep the gradient of an intermediate value after `backward`, and make
    /// everything computed from it differentiable.
    pub fn watch(&mut self, var: Var) {
        let node = &mut self.nodes[var.0];
        node.requires_grad = true;
        node.retain = true;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a value computed by an external [`Function`].
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, func: Box<dyn Function<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x[N,K] + bias[K]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, k) = dims2(xv)?;
        if bv.numel() != k {
            return Err(Error::Shape(format!(
                "bias of shape {:?} does not match {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(k) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    /// Cross-correlation of `input[N,C,H,W]` with `kernel[F,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel batch normalization over `N,H,W` followed by an affine map.
    /// In training mode the observed batch statistics are returned.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let x = self.value(input);
        let (n, c, h, w) = dims4(x)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::Shape(format!(
                "batch norm affine parameters must have {c} channels, got {:?} and {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let plane = h * w;
        let count = n * plane;
        let channel = |ch: usize| {
            (0..n).flat_map(move |s| {
                let base = (s * c + ch) * plane;
                base..base + plane
            })
        };
        let (mean, inv_std, stats, train) = match mode {
            BnMode::Train { eps } => {
                if count < 2 {
                    return Err(Error::InvalidInput(
                        "training-mode batch norm needs at least two values per channel".into(),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mut unbiased = vec![T::zero(); c];
                for ch in 0..c {
                    let mu =
                        channel(ch).map(|i| x.data()[i].to_f64_lossy()).sum::<f64>() / count as f64;
                    let ss: f64 = channel(ch)
                        .map(|i| (x.data()[i].to_f64_lossy() - mu).powi(2))
                        .sum();
                    mean[ch] = T::from_f64_lossy(mu);
                    var[ch] = T::from_f64_lossy(ss / count as f64);
                    unbiased[ch] = T::from_f64_lossy(ss / (count - 1) as f64);
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (
                    mean.clone(),
                    inv_std,
                    Some(BnStats {
                        mean,
                        var: unbiased,
                    }),
                    true,
                )
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "running statistics must have {c} channels"
                    )));
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for ch in 0..c {
            let (mu, is, gg, bb) = (mean[ch], inv_std[ch], g.data()[ch], b.data()[ch]);
            for i in channel(ch) {
                let xh = (x.data()[i] - mu) * is;
                xhat[i] = xh;
                out[i] = gg * xh + bb;
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((var, stats))
    }

    /// Max pooling with square window.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        size: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = dims4(x)?;
        let oh = conv_out_dim(h, size, stride, padding)
            .ok_or_else(|| Error::Shape(format!("pool window {size} too large for {h}x{w}")))?;
        let ow = conv_out_dim(w, size, stride, padding)
            .ok_or_else(|| Error::Shape(format!("pool window {size} too large for {h}x{w}")))?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..size {
                        for kx in 0..size {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || x.data()[i] > best {
                                best = x.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    if best_i == usize::MAX {
                        return Err(Error::Shape("pool window covers only padding".into()));
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = dims4(x)?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).expect("plane size");
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    /// Normalize along the last axis to unit Euclidean length.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let d = *x.shape().last().expect("non-empty shape");
        let mut norms = Vec::with_capacity(x.numel() / d);
        let mut out = Vec::with_capacity(x.numel());
        for (r, row) in x.data().chunks(d).enumerate() {
            let norm = super::l2_norm(row);
            if norm.to_f64_lossy() < 1e-12 {
                return Err(Error::Degenerate(format!(
                    "row {r} has norm {norm}, cannot normalize"
                )));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(out, Op::L2Normalize { input, norms }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = dims2(x)?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &label) in x.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total += (z.ln() - (row[label] - max)).to_f64_lossy();
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let out = Tensor::scalar(T::from_f64_lossy(total / n as f64));
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar. Gradients are kept for leaves and watched
    /// values; intermediate gradients are released as soon as they are used.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = (if node.retain {
                grads[idx].clone()
            } else {
                grads[idx].take()
            }) else {
                continue;
            };
            let inputs = node.op.inputs();
            if inputs.is_empty() {
                continue;
            }
            let partials = self.op_backward(node, &g)?;
            for (var, partial) in inputs.into_iter().zip(partials) {
                let Some(partial) = partial else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, p) in acc.data_mut().iter_mut().zip(partial.data()) {
                            *a = *a + *p;
                        }
                    }
                    slot @ None => *slot = Some(partial),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn op_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(av)?;
                let (_, n) = dims2(bv)?;
                let da = self.needs(*a).then(|| {
                    let mut out = vec![T::zero(); m * k];
                    gemm(
                        false,
                        true,
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        bv.data(),
                        T::zero(),
                        &mut out,
                    );
                    Tensor::new(&[m, k], out)
                });
                let db = self.needs(*b).then(|| {
                    let mut out = vec![T::zero(); k * n];
                    gemm(
                        true,
                        false,
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        g.data(),
                        T::zero(),
                        &mut out,
                    );
                    Tensor::new(&[k, n], out)
                });
                vec![da.transpose()?, db.transpose()?]
            }
            Op::AddBias(_, bias) => {
                let k = self.value(*bias).numel();
                let mut db = vec![T::zero(); k];
                for row in g.data().chunks(k) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::new(self.value(*bias).shape(), db)?),
                ]
            }
            Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = zip(g, bv, |x, y| x * y)?;
                let db = zip(g, av, |x, y| x * y)?;
                vec![Some(da), Some(db)]
            }
            Op::Scale(_, c) => vec![Some(g.map(|x| x * *c))],
            Op::Sum(a) => vec![Some(Tensor::full(self.value(*a).shape(), g.data()[0]))],
            Op::Reshape(a) => vec![Some(g.clone().reshape(self.value(*a).shape())?)],
            Op::Relu(_) => {
                let mask = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                    .collect();
                vec![Some(Tensor::new(g.shape(), data)?)]
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.needs(*input),
                    self.needs(*kernel),
                )?;
                vec![dx, dk]
            }
            Op::BatchNorm {
                input,
                gamma,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let (n, c, h, w) = dims4(self.value(*input))?;
                let gv = self.value(*gamma).data();
                let plane = h * w;
                let count = T::from_usize(n * plane).expect("count");
                let mut dx = vec![T::zero(); g.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let idx = (0..n).flat_map(|s| {
                        let base = (s * c + ch) * plane;
                        base..base + plane
                    });
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for i in idx.clone() {
                        sum_dy = sum_dy + g.data()[i];
                        sum_dy_xhat = sum_dy_xhat + g.data()[i] * xhat[i];
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let scale = gv[ch] * inv_std[ch];
                    if *train {
                        for i in idx {
                            dx[i] =
                                scale * (g.data()[i] - (sum_dy + xhat[i] * sum_dy_xhat) / count);
                        }
                    } else {
                        for i in idx {
                            dx[i] = scale * g.data()[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(g.shape(), dx)?),
                    Some(Tensor::new(&[c], dgamma)?),
                    Some(Tensor::new(&[c], dbeta)?),
                ]
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = self.value(*input).zeros_like();
                for (&i, &d) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[i] = dx.data_mut()[i] + d;
                }
                vec![Some(dx)]
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let (_, _, h, w) = dims4(x)?;
                let inv = T::one() / T::from_usize(h * w).expect("plane");
                let mut dx = Vec::with_capacity(x.numel());
                for &d in g.data() {
                    dx.extend(std::iter::repeat(d * inv).take(h * w));
                }
                vec![Some(Tensor::new(x.shape(), dx)?)]
            }
            Op::L2Normalize { norms, .. } => {
                // d/dx (x/|x|) = (g - y <y,g>) / |x|
                let y = &node.value;
                let d = *y.shape().last().expect("rank");
                let mut dx = Vec::with_capacity(y.numel());
                for ((yr, gr), &norm) in y.data().chunks(d).zip(g.data().chunks(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yy, &gg)| (gg - yy * dot) / norm));
                }
                vec![Some(Tensor::new(y.shape(), dx)?)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let x = self.value(*logits);
                let (n, k) = dims2(x)?;
                let scale = g.data()[0] / T::from_usize(n).expect("rows");
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] = dx[r * k + l] - T::one();
                }
                for v in &mut dx {
                    *v = *v * scale;
                }
                vec![Some(Tensor::new(x.shape(), dx)?)]
            }
            Op::Custom { inputs, func } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let out = func.backward(g, &vals, &node.value)?;
                if out.len() != inputs.len() {
                    return Err(Error::Shape(format!(
                        "{} returned {} gradients for {} inputs",
                        func.name(),
                        out.len(),
                        inputs.len()
                    )));
                }
                out
            }
        })
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (n, c, h, w) = dims4(x)?;
        let (f, kc, kh, kw) = dims4(k)?;
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {:?} has {c} channels, kernel {:?} expects {kc}",
                x.shape(),
                k.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let dim_err = || {
            Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{} (padding {padding})",
                h + 2 * padding,
                w + 2 * padding
            ))
        };
        let oh = conv_out_dim(h, kh, stride, padding).ok_or_else(dim_err)?;
        let ow = conv_out_dim(w, kw, stride, padding).ok_or_else(dim_err)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh,
            ow,
        })
    }

    fn is_pointwise(&self, stride: usize, padding: usize) -> bool {
        self.kh == 1 && self.kw == 1 && stride == 1 && padding == 0
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeom::new(x, k, stride, padding)?;
    let ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh,
        ow,
    } = geo;
    let rows = c * kh * kw;
    let plane = oh * ow;
    let mut out = vec![T::zero(); n * f * plane];
    let mut cols = vec![
        T::zero();
        if geo.is_pointwise(stride, padding) {
            0
        } else {
            rows * plane
        }
    ];
    for s in 0..n {
        let img = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let patch: &[T] = if geo.is_pointwise(stride, padding) {
            img
        } else {
            im2col(img, c, h, w, kh, kw, stride, padding, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out[s * f * plane..(s + 1) * f * plane];
        gemm(
            false,
            false,
            f,
            rows,
            plane,
            T::one(),
            k.data(),
            patch,
            T::zero(),
            dst,
        );
    }
    Tensor::new(&[n, f, oh, ow], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_dx: bool,
    want_dk: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let geo = ConvGeom::new(x, k, stride, padding)?;
    let ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh,
        ow,
    } = geo;
    let pointwise = geo.is_pointwise(stride, padding);
    let rows = c * kh * kw;
    let plane = oh * ow;
    let mut dk = want_dk.then(|| vec![T::zero(); k.numel()]);
    let mut dx = want_dx.then(|| vec![T::zero(); x.numel()]);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
    let mut dcols = vec![
        T::zero();
        if pointwise || !want_dx {
            0
        } else {
            rows * plane
        }
    ];
    for s in 0..n {
        let img = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let gs = &g.data()[s * f * plane..(s + 1) * f * plane];
        if let Some(dk) = dk.as_mut() {
            let patch: &[T] = if pointwise {
                img
            } else {
                im2col(img, c, h, w, kh, kw, stride, padding, oh, ow, &mut cols);
                &cols
            };
            gemm(
                false,
                true,
                f,
                plane,
                rows,
                T::one(),
                gs,
                patch,
                T::one(),
                dk,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[s * c * h * w..(s + 1) * c * h * w];
            if pointwise {
                gemm(
                    true,
                    false,
                    rows,
                    f,
                    plane,
                    T::one(),
                    k.data(),
                    gs,
                    T::zero(),
                    dst,
                );
            } else {
                gemm(
                    true,
                    false,
                    rows,
                    f,
                    plane,
                    T::one(),
                    k.data(),
                    gs,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, c, h, w, kh, kw, stride, padding, oh, ow, dst);
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dk.map(|d| Tensor::new(k.shape(), d)).transpose()?,
    ))
}
