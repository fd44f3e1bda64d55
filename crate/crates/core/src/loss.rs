//! Normalized temperature-scaled cross-entropy (NT-Xent) over positive pairs.
//!
//! Rows `2k` and `2k+1` of the embedding matrix are two views of one source.
//! For an anchor `i` with positive `j`:
//!
//! ```text
//! l(i, j) = -log( exp(s_ij / t) / sum_{k != i} exp(s_ik / t) )
//! L       = 1/(2N) * sum_k [ l(2k, 2k+1) + l(2k+1, 2k) ]
//! ```
//!
//! with `s_ij = z_i . z_j` on unit-norm rows (so `s` is the cosine). All
//! reductions run in `f64` regardless of the tensor element type.

use crate::error::{Error, Result};
use crate::tensor::{dims2, Function, Scalar, Tape, Tensor, Var};

/// Rows further than this from unit norm are rejected.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidInput(format!(
                "temperature {tau} must be positive"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Pairwise dot products of the rows of `Z`; the diagonal is masked.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    /// `None` on the diagonal.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i != j).then(|| self.values[i * self.n + j])
    }

    fn raw(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

pub fn pairwise_similarity<T: Scalar>(z: &Tensor<T>) -> Result<SimilarityMatrix> {
    let (n, d) = dims2(z)?;
    let rows: Vec<Vec<f64>> = z
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|x| x.to_f64_lossy()).collect())
        .collect();
    for (i, r) in rows.iter().enumerate() {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "embedding row {i} has norm {norm}; rows must be unit-normalized"
            )));
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Softmax of row `i` over `k != i` at temperature `tau`; entry `i` is 0.
fn row_softmax(s: &SimilarityMatrix, i: usize, tau: f64) -> (Vec<f64>, f64) {
    let n = s.n;
    let max = (0..n)
        .filter(|&k| k != i)
        .map(|k| s.raw(i, k) / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; n];
    let mut z = 0.0;
    for k in (0..n).filter(|&k| k != i) {
        p[k] = (s.raw(i, k) / tau - max).exp();
        z += p[k];
    }
    for v in &mut p {
        *v /= z;
    }
    (p, max + z.ln())
}

/// `l(i, j)`: negative log of the softmax weight of `j` in row `i`.
pub fn pair_loss(s: &SimilarityMatrix, i: usize, j: usize, tau: f64) -> Result<f64> {
    let tau = Temperature::new(tau)?.value();
    if i == j || i >= s.n || j >= s.n {
        return Err(Error::InvalidInput(format!(
            "pair ({i}, {j}) invalid for {} rows",
            s.n
        )));
    }
    let (_, log_z) = row_softmax(s, i, tau);
    Ok(log_z - s.raw(i, j) / tau)
}

fn positive_of(i: usize) -> usize {
    i ^ 1
}

fn check_rows(rows: usize) -> Result<()> {
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "contrastive batch needs an even number (>= 2) of rows, got {rows}"
        )));
    }
    Ok(())
}

/// Batch loss and `dL/dS` (row-major `2N x 2N`, zero diagonal).
pub fn batch_loss_with_similarity_grad(s: &SimilarityMatrix, tau: f64) -> Result<(f64, Vec<f64>)> {
    let tau = Temperature::new(tau)?.value();
    let n = s.n;
    check_rows(n)?;
    let scale = 1.0 / (n as f64 * tau);
    let mut total = 0.0;
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        let j = positive_of(i);
        let (p, log_z) = row_softmax(s, i, tau);
        total += log_z - s.raw(i, j) / tau;
        for k in (0..n).filter(|&k| k != i) {
            let target = if k == j { 1.0 } else { 0.0 };
            grad[i * n + k] = (p[k] - target) * scale;
        }
    }
    Ok((total / n as f64, grad))
}

/// Loss value without building a tape.
pub fn batch_loss_value<T: Scalar>(z: &Tensor<T>, tau: f64) -> Result<f64> {
    let (rows, _) = dims2(z)?;
    check_rows(rows)?;
    let s = pairwise_similarity(z)?;
    Ok(batch_loss_with_similarity_grad(&s, tau)?.0)
}

struct NtXent {
    /// `dL/dS`, already scaled by `1/(2N)`.
    sim_grad: Vec<f64>,
}

impl<T: Scalar> Function<T> for NtXent {
    fn name(&self) -> &'static str {
        "nt_xent"
    }

    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        // S = Z Z^T  =>  dZ = (G + G^T) Z
        let z = inputs[0];
        let (n, d) = dims2(z)?;
        let upstream = grad_out.data()[0].to_f64_lossy();
        let g = &self.sim_grad;
        let mut dz = vec![T::zero(); n * d];
        for i in 0..n {
            let out = &mut dz[i * d..(i + 1) * d];
            let mut acc = vec![0.0f64; d];
            for k in 0..n {
                let w = g[i * n + k] + g[k * n + i];
                if w == 0.0 {
                    continue;
                }
                for (a, zk) in acc.iter_mut().zip(&z.data()[k * d..(k + 1) * d]) {
                    *a += w * zk.to_f64_lossy();
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = T::from_f64_lossy(a * upstream);
            }
        }
        Ok(vec![Some(Tensor::new(z.shape(), dz)?)])
    }
}

/// Differentiable NT-Xent over unit-norm rows `z[2N, D]`.
pub fn batch_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, tau: f64) -> Result<Var> {
    let zv = tape.value(z);
    let (rows, _) = dims2(zv)?;
    check_rows(rows)?;
    let s = pairwise_similarity(zv)?;
    let (loss, sim_grad) = batch_loss_with_similarity_grad(&s, tau)?;
    let out = Tensor::scalar(T::from_f64_lossy(loss));
    Ok(tape.custom(&[z], out, Box::new(NtXent { sim_grad })))
}
