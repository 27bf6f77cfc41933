//! Forward kernels and their backward rules.

use super::{grad_enabled, Mask, Tensor};
use crate::error::{TensorError, TensorResult};
use crate::rng::CounterRng;

/// Recorded operation: holds the input handles and whatever forward context
/// the backward rule needs.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Neg(Tensor),
    Exp(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Clamp(Tensor, f64, f64),
    Matmul(Tensor, Tensor),
    MatmulNT(Tensor, Tensor),
    Transpose(Tensor),
    GatherRows(Tensor, Vec<usize>),
    ConcatRows(Vec<Tensor>),
    ConcatCols(Tensor, Tensor),
    SliceCols(Tensor, usize, usize),
    SumAll(Tensor),
    MeanAll(Tensor),
    Softmax {
        x: Tensor,
        axis: usize,
        mask: Option<Mask>,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropyRows {
        logits: Tensor,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedBceLogits {
        logits: Tensor,
        targets: Vec<f64>,
        pos_weight: f64,
    },
    KlDiagGaussians {
        mu_q: Tensor,
        log_sigma_q: Tensor,
        mu_p: Tensor,
        log_sigma_p: Tensor,
    },
    Dropout {
        x: Tensor,
        keep: Vec<bool>,
        scale: f64,
    },
}

fn result_of(inputs: &[&Tensor], data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
    let requires = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    Tensor::make(data, shape, requires, if requires { Some(op) } else { None })
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Row-major 2D matrix product used by matmul kernels and their backward
/// rules. `transpose_b` computes A @ B^T with B given as [n, k].
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, transpose_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if transpose_b {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                out[i * n + j] = s;
            }
        }
    } else {
        // i-k-j order keeps the inner loop contiguous in both b and out.
        for i in 0..m {
            let or = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
    out
}

/// A^T @ B with A given as [k, m]: used for weight gradients.
fn mm_ta(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

fn mat_dims(t: &Tensor, what: &str) -> TensorResult<(usize, usize)> {
    match t.shape().len() {
        1 => Ok((1, t.shape()[0])),
        2 => Ok((t.shape()[0], t.shape()[1])),
        r => Err(TensorError::Dimension(format!("{what}: rank-{r} tensor, expected rank <= 2"))),
    }
}

// Slices along `axis`: a tensor of shape S decomposes into outer *
// stride slices of length S[axis], stepping by stride.
fn axis_geometry(shape: &[usize], axis: usize) -> TensorResult<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let axis_len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    Ok((outer, axis_len, stride))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(result_of(
            &[self, other],
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// Broadcast-add a 1 x n (or length-n) row onto every row of an m x n tensor.
    pub fn add_row(&self, row: &Tensor) -> TensorResult<Tensor> {
        let (m, n) = mat_dims(self, "add_row")?;
        let (rm, rn) = mat_dims(row, "add_row")?;
        if rm != 1 || rn != n {
            return Err(TensorError::Dimension(format!(
                "add_row: row shape {:?} incompatible with {:?}",
                row.shape(),
                self.shape()
            )));
        }
        let rd = row.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + rd[i % n])
            .collect();
        drop(rd);
        let _ = m;
        Ok(result_of(
            &[self, row],
            data,
            self.shape().to_vec(),
            Op::AddRow(self.clone(), row.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(result_of(
            &[self, other],
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(result_of(
            &[self, other],
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::MulScalar(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|a| -a).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::Neg(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.max(0.0)).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|a| sigmoid(*a)).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.tanh()).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|a| a.clamp(lo, hi)).collect();
        result_of(&[self], data, self.shape().to_vec(), Op::Clamp(self.clone(), lo, hi))
    }

    /// Standard matrix product: [m, k] @ [k, n] -> [m, n].
    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (m, k) = mat_dims(self, "matmul lhs")?;
        let (k2, n) = mat_dims(other, "matmul rhs")?;
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "matmul: inner dimensions {k} and {k2} differ ({:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let data = mm(&self.data(), &other.data(), m, k, n, false);
        Ok(result_of(
            &[self, other],
            data,
            vec![m, n],
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Product against a transposed right factor: [m, k] @ [n, k]^T -> [m, n].
    pub fn matmul_nt(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (m, k) = mat_dims(self, "matmul_nt lhs")?;
        let (n, k2) = mat_dims(other, "matmul_nt rhs")?;
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "matmul_nt: inner dimensions {k} and {k2} differ ({:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let data = mm(&self.data(), &other.data(), m, k, n, true);
        Ok(result_of(
            &[self, other],
            data,
            vec![m, n],
            Op::MatmulNT(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> TensorResult<Tensor> {
        let (m, n) = mat_dims(self, "transpose")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        Ok(result_of(&[self], data, vec![n, m], Op::Transpose(self.clone())))
    }

    /// Embedding lookup: output row i is table row ids[i]; backward
    /// accumulates into the gathered rows.
    pub fn gather_rows(&self, ids: &[usize]) -> TensorResult<Tensor> {
        let (v, d) = mat_dims(self, "gather_rows")?;
        let src = self.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { id, rows: v });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        drop(src);
        Ok(result_of(
            &[self],
            data,
            vec![ids.len(), d],
            Op::GatherRows(self.clone(), ids.to_vec()),
        ))
    }

    pub fn slice_cols(&self, lo: usize, hi: usize) -> TensorResult<Tensor> {
        let (m, n) = mat_dims(self, "slice_cols")?;
        if lo >= hi || hi > n {
            return Err(TensorError::Dimension(format!(
                "slice_cols: range {lo}..{hi} invalid for {n} columns"
            )));
        }
        let w = hi - lo;
        let src = self.data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + lo..i * n + hi]);
        }
        drop(src);
        Ok(result_of(
            &[self],
            data,
            vec![m, w],
            Op::SliceCols(self.clone(), lo, hi),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        result_of(&[self], vec![s], vec![1], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        result_of(&[self], vec![s / n], vec![1], Op::MeanAll(self.clone()))
    }

    /// Masked softmax along `axis`. Masked positions are exactly 0 in the
    /// output; a slice with no unmasked entry is an error.
    pub fn softmax(&self, axis: usize, mask: Option<&Mask>) -> TensorResult<Tensor> {
        if let Some(m) = mask {
            if m.shape() != self.shape() {
                return Err(TensorError::Dimension(format!(
                    "softmax mask shape {:?} does not match input {:?}",
                    m.shape(),
                    self.shape()
                )));
            }
        }
        let (outer, axis_len, stride) = axis_geometry(self.shape(), axis)?;
        let src = self.data();
        let keep = mask.map(|m| m.keep());
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..stride {
                let base = o * axis_len * stride + r;
                let idx = |j: usize| base + j * stride;
                let mut max = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    let i = idx(j);
                    if keep.map_or(true, |k| k[i]) {
                        max = max.max(src[i]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateMask {
                        axis,
                        slice: o * stride + r,
                    });
                }
                let mut denom = 0.0;
                for j in 0..axis_len {
                    let i = idx(j);
                    if keep.map_or(true, |k| k[i]) {
                        let e = (src[i] - max).exp();
                        data[i] = e;
                        denom += e;
                    }
                }
                for j in 0..axis_len {
                    let i = idx(j);
                    data[i] /= denom;
                }
            }
        }
        drop(src);
        Ok(result_of(
            &[self],
            data,
            self.shape().to_vec(),
            Op::Softmax {
                x: self.clone(),
                axis,
                mask: mask.cloned(),
            },
        ))
    }

    /// Row-wise layer normalization with affine gain/bias (each 1 x d).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> TensorResult<Tensor> {
        let (m, d) = mat_dims(self, "layer_norm")?;
        if gain.numel() != d || bias.numel() != d {
            return Err(TensorError::Dimension(format!(
                "layer_norm: gain/bias length {}/{} does not match width {d}",
                gain.numel(),
                bias.numel()
            )));
        }
        if d < 2 {
            return Err(TensorError::Contract(
                "layer_norm: normalized axis length must be >= 2".into(),
            ));
        }
        let src = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut data = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                data[i * d + j] = g[j] * xh + b[j];
            }
        }
        drop(src);
        drop(g);
        drop(b);
        Ok(result_of(
            &[self, gain, bias],
            data,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout; identity when rate == 0.
    pub fn dropout(&self, rate: f64, rng: &mut CounterRng) -> TensorResult<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<bool> = (0..self.numel()).map(|_| rng.uniform() >= rate).collect();
        let data = self
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        Ok(result_of(
            &[self],
            data,
            self.shape().to_vec(),
            Op::Dropout {
                x: self.clone(),
                keep,
                scale,
            },
        ))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) computed without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Vertical stack of same-width tensors.
pub fn concat_rows(parts: &[&Tensor]) -> TensorResult<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::Contract("concat_rows of zero tensors".into()));
    }
    let d = mat_dims(parts[0], "concat_rows")?.1;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (m, n) = mat_dims(p, "concat_rows")?;
        if n != d {
            return Err(TensorError::Dimension(format!(
                "concat_rows: widths {d} and {n} differ"
            )));
        }
        rows += m;
        data.extend_from_slice(&p.data());
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let requires = grad_enabled() && owned.iter().any(|t| t.requires_grad());
    Ok(Tensor::make(
        data,
        vec![rows, d],
        requires,
        if requires { Some(Op::ConcatRows(owned)) } else { None },
    ))
}

/// Horizontal concatenation: [m, a] ++ [m, b] -> [m, a + b].
pub fn concat_cols(left: &Tensor, right: &Tensor) -> TensorResult<Tensor> {
    let (m, a) = mat_dims(left, "concat_cols")?;
    let (m2, b) = mat_dims(right, "concat_cols")?;
    if m != m2 {
        return Err(TensorError::Dimension(format!(
            "concat_cols: row counts {m} and {m2} differ"
        )));
    }
    let ld = left.data();
    let rd = right.data();
    let mut data = Vec::with_capacity(m * (a + b));
    for i in 0..m {
        data.extend_from_slice(&ld[i * a..(i + 1) * a]);
        data.extend_from_slice(&rd[i * b..(i + 1) * b]);
    }
    drop(ld);
    drop(rd);
    Ok(result_of(
        &[left, right],
        data,
        vec![m, a + b],
        Op::ConcatCols(left.clone(), right.clone()),
    ))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`; the log-softmax is computed via a fused log-sum-exp.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> TensorResult<Tensor> {
    let (m, v) = mat_dims(logits, "cross_entropy_rows")?;
    if targets.len() != m {
        return Err(TensorError::Dimension(format!(
            "cross_entropy_rows: {m} logit rows vs {} targets",
            targets.len()
        )));
    }
    let src = logits.data();
    let mut probs = vec![0.0; m * v];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(TensorError::Index { id: t, rows: v });
        }
        let row = &src[i * v..(i + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..v {
            let e = (row[j] - max).exp();
            probs[i * v + j] = e;
            denom += e;
        }
        for j in 0..v {
            probs[i * v + j] /= denom;
        }
        total += denom.ln() + max - row[t];
    }
    drop(src);
    Ok(result_of(
        &[logits],
        vec![total / m as f64],
        vec![1],
        Op::CrossEntropyRows {
            logits: logits.clone(),
            targets: targets.to_vec(),
            probs,
        },
    ))
}

/// Mean of the pos_weight-scaled binary cross-entropy on logits:
/// `mean_i [ pos_weight * y_i * softplus(-x_i) + (1 - y_i) * softplus(x_i) ]`.
pub fn weighted_bce_logits(
    logits: &Tensor,
    targets: &Tensor,
    pos_weight: f64,
) -> TensorResult<Tensor> {
    same_shape(logits, targets, "weighted_bce_logits")?;
    let t = targets.data();
    if t.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Contract(
            "weighted_bce_logits: targets must be 0 or 1".into(),
        ));
    }
    let x = logits.data();
    let n = x.len() as f64;
    let mut total = 0.0;
    for (xi, yi) in x.iter().zip(t.iter()) {
        total += if *yi == 1.0 {
            pos_weight * softplus(-xi)
        } else {
            softplus(*xi)
        };
    }
    drop(x);
    let targets_v = t.clone();
    drop(t);
    Ok(result_of(
        &[logits],
        vec![total / n],
        vec![1],
        Op::WeightedBceLogits {
            logits: logits.clone(),
            targets: targets_v,
            pos_weight,
        },
    ))
}

/// Closed-form KL( N(mu_q, e^{2 ls_q}) || N(mu_p, e^{2 ls_p}) ) for diagonal
/// Gaussians, summed over all dimensions.
pub fn kl_diag_gaussians(
    mu_q: &Tensor,
    log_sigma_q: &Tensor,
    mu_p: &Tensor,
    log_sigma_p: &Tensor,
) -> TensorResult<Tensor> {
    same_shape(mu_q, log_sigma_q, "kl_diag_gaussians")?;
    same_shape(mu_q, mu_p, "kl_diag_gaussians")?;
    same_shape(mu_q, log_sigma_p, "kl_diag_gaussians")?;
    let mq = mu_q.data();
    let lq = log_sigma_q.data();
    let mp = mu_p.data();
    let lp = log_sigma_p.data();
    let mut total = 0.0;
    for i in 0..mq.len() {
        let delta = mq[i] - mp[i];
        let var_ratio = (2.0 * (lq[i] - lp[i])).exp();
        total += lp[i] - lq[i] + 0.5 * (var_ratio + delta * delta * (-2.0 * lp[i]).exp() - 1.0);
    }
    drop(mq);
    drop(lq);
    drop(mp);
    drop(lp);
    Ok(result_of(
        &[mu_q, log_sigma_q, mu_p, log_sigma_p],
        vec![total],
        vec![1],
        Op::KlDiagGaussians {
            mu_q: mu_q.clone(),
            log_sigma_q: log_sigma_q.clone(),
            mu_p: mu_p.clone(),
            log_sigma_p: log_sigma_p.clone(),
        },
    ))
}

/// Log-sigma clamp applied before every exp of a log-standard-deviation.
pub const LOG_SIGMA_CLAMP: (f64, f64) = (-10.0, 10.0);

/// Pathwise (reparameterized) Gaussian sample: mu + e^{clamp(log_sigma)} * eps
/// with eps ~ N(0, I) drawn from `rng`. Differentiable w.r.t. mu and
/// log_sigma; the noise is a constant of the graph.
pub fn gaussian_reparam_sample(
    mu: &Tensor,
    log_sigma: &Tensor,
    rng: &mut CounterRng,
) -> TensorResult<Tensor> {
    same_shape(mu, log_sigma, "gaussian_reparam_sample")?;
    let eps = Tensor::randn(mu.shape(), 1.0, rng);
    let sigma = log_sigma.clamp(LOG_SIGMA_CLAMP.0, LOG_SIGMA_CLAMP.1).exp();
    mu.add(&sigma.mul(&eps)?)
}

impl Op {
    /// Propagate `grad` (same shape as the op's output) into the inputs.
    /// `out_data` is the forward output, available for rules that reuse it.
    pub(crate) fn backward(&self, out_data: &[f64], grad: &[f64]) {
        match self {
            Op::Add(a, b) => {
                acc(a, grad);
                acc(b, grad);
            }
            Op::AddRow(a, row) => {
                acc(a, grad);
                if row.requires_grad() {
                    let n = row.numel();
                    let mut rg = vec![0.0; n];
                    for (i, g) in grad.iter().enumerate() {
                        rg[i % n] += g;
                    }
                    row.accumulate_grad(&rg);
                }
            }
            Op::Sub(a, b) => {
                acc(a, grad);
                if b.requires_grad() {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    let ga: Vec<f64> = grad.iter().zip(bd.iter()).map(|(g, v)| g * v).collect();
                    drop(bd);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let gb: Vec<f64> = grad.iter().zip(ad.iter()).map(|(g, v)| g * v).collect();
                    drop(ad);
                    b.accumulate_grad(&gb);
                }
            }
            Op::AddScalar(a) => acc(a, grad),
            Op::MulScalar(a, c) => {
                if a.requires_grad() {
                    let ga: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    a.accumulate_grad(&ga);
                }
            }
            Op::Neg(a) => {
                if a.requires_grad() {
                    let ga: Vec<f64> = grad.iter().map(|g| -g).collect();
                    a.accumulate_grad(&ga);
                }
            }
            Op::Exp(a) => {
                if a.requires_grad() {
                    let ga: Vec<f64> = grad.iter().zip(out_data).map(|(g, y)| g * y).collect();
                    a.accumulate_grad(&ga);
                }
            }
            Op::Relu(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(ad.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&ga);
                }
            }
            Op::Sigmoid(a) => {
                if a.requires_grad() {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(out_data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    a.accumulate_grad(&ga);
                }
            }
            Op::Tanh(a) => {
                if a.requires_grad() {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(out_data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    a.accumulate_grad(&ga);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(ad.iter())
                        .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&ga);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                if a.requires_grad() {
                    // dA = dC @ B^T
                    let ga = mm(grad, &b.data(), m, n, k, true);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    // dB = A^T @ dC
                    let gb = mm_ta(&a.data(), grad, m, k, n);
                    b.accumulate_grad(&gb);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (a.rows(), a.cols());
                let n = b.rows();
                if a.requires_grad() {
                    // dA = dC @ B
                    let ga = mm(grad, &b.data(), m, n, k, false);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    // dB = dC^T @ A
                    let gb = mm_ta(grad, &a.data(), m, n, k);
                    b.accumulate_grad(&gb);
                }
            }
            Op::Transpose(a) => {
                if a.requires_grad() {
                    let (m, n) = (a.rows(), a.cols());
                    let mut ga = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] = grad[i * m + j];
                        }
                    }
                    a.accumulate_grad(&ga);
                }
            }
            Op::GatherRows(table, ids) => {
                if table.requires_grad() {
                    let d = table.cols();
                    let mut gt = vec![0.0; table.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += grad[i * d + j];
                        }
                    }
                    table.accumulate_grad(&gt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    if p.requires_grad() {
                        p.accumulate_grad(&grad[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, wa) = (a.rows(), a.cols());
                let wb = b.cols();
                if a.requires_grad() {
                    let mut ga = vec![0.0; m * wa];
                    for i in 0..m {
                        ga[i * wa..(i + 1) * wa]
                            .copy_from_slice(&grad[i * (wa + wb)..i * (wa + wb) + wa]);
                    }
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; m * wb];
                    for i in 0..m {
                        gb[i * wb..(i + 1) * wb]
                            .copy_from_slice(&grad[i * (wa + wb) + wa..(i + 1) * (wa + wb)]);
                    }
                    b.accumulate_grad(&gb);
                }
            }
            Op::SliceCols(a, lo, hi) => {
                if a.requires_grad() {
                    let (m, n) = (a.rows(), a.cols());
                    let w = hi - lo;
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n + lo..i * n + hi].copy_from_slice(&grad[i * w..(i + 1) * w]);
                    }
                    a.accumulate_grad(&ga);
                }
            }
            Op::SumAll(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![grad[0]; a.numel()]);
                }
            }
            Op::MeanAll(a) => {
                if a.requires_grad() {
                    let g = grad[0] / a.numel() as f64;
                    a.accumulate_grad(&vec![g; a.numel()]);
                }
            }
            Op::Softmax { x, axis, mask } => {
                if x.requires_grad() {
                    let (outer, axis_len, stride) = axis_geometry(x.shape(), *axis).unwrap();
                    let keep = mask.as_ref().map(|m| m.keep());
                    let mut gx = vec![0.0; out_data.len()];
                    for o in 0..outer {
                        for r in 0..stride {
                            let base = o * axis_len * stride + r;
                            let idx = |j: usize| base + j * stride;
                            let mut dot = 0.0;
                            for j in 0..axis_len {
                                let i = idx(j);
                                dot += grad[i] * out_data[i];
                            }
                            for j in 0..axis_len {
                                let i = idx(j);
                                if keep.map_or(true, |k| k[i]) {
                                    gx[i] = out_data[i] * (grad[i] - dot);
                                }
                            }
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = (x.rows(), x.cols());
                if gain.requires_grad() {
                    let mut gg = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] += grad[i * d + j] * xhat[i * d + j];
                        }
                    }
                    gain.accumulate_grad(&gg);
                }
                if bias.requires_grad() {
                    let mut gb = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gb[j] += grad[i * d + j];
                        }
                    }
                    bias.accumulate_grad(&gb);
                }
                if x.requires_grad() {
                    let g = gain.data();
                    let mut gx = vec![0.0; m * d];
                    for i in 0..m {
                        // dxhat = grad * gain; dx follows the standard
                        // layer-norm backward with per-row statistics.
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = grad[i * d + j] * g[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * d + j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = grad[i * d + j] * g[j];
                            gx[i * d + j] =
                                inv_std[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                        }
                    }
                    drop(g);
                    x.accumulate_grad(&gx);
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                if logits.requires_grad() {
                    let (m, v) = (logits.rows(), logits.cols());
                    let scale = grad[0] / m as f64;
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * v + t] -= 1.0;
                    }
                    for g in gl.iter_mut() {
                        *g *= scale;
                    }
                    logits.accumulate_grad(&gl);
                }
            }
            Op::WeightedBceLogits {
                logits,
                targets,
                pos_weight,
            } => {
                if logits.requires_grad() {
                    let x = logits.data();
                    let n = x.len() as f64;
                    let scale = grad[0] / n;
                    let gl: Vec<f64> = x
                        .iter()
                        .zip(targets.iter())
                        .map(|(xi, yi)| {
                            let s = sigmoid(*xi);
                            if *yi == 1.0 {
                                pos_weight * (s - 1.0) * scale
                            } else {
                                s * scale
                            }
                        })
                        .collect();
                    drop(x);
                    logits.accumulate_grad(&gl);
                }
            }
            Op::KlDiagGaussians {
                mu_q,
                log_sigma_q,
                mu_p,
                log_sigma_p,
            } => {
                let mq = mu_q.data();
                let lq = log_sigma_q.data();
                let mp = mu_p.data();
                let lp = log_sigma_p.data();
                let n = mq.len();
                let g = grad[0];
                let mut g_mq = vec![0.0; n];
                let mut g_lq = vec![0.0; n];
                let mut g_mp = vec![0.0; n];
                let mut g_lp = vec![0.0; n];
                for i in 0..n {
                    let delta = mq[i] - mp[i];
                    let inv_var_p = (-2.0 * lp[i]).exp();
                    let var_ratio = (2.0 * (lq[i] - lp[i])).exp();
                    g_mq[i] = g * delta * inv_var_p;
                    g_mp[i] = -g_mq[i];
                    g_lq[i] = g * (var_ratio - 1.0);
                    g_lp[i] = g * (1.0 - var_ratio - delta * delta * inv_var_p);
                }
                drop(mq);
                drop(lq);
                drop(mp);
                drop(lp);
                if mu_q.requires_grad() {
                    mu_q.accumulate_grad(&g_mq);
                }
                if log_sigma_q.requires_grad() {
                    log_sigma_q.accumulate_grad(&g_lq);
                }
                if mu_p.requires_grad() {
                    mu_p.accumulate_grad(&g_mp);
                }
                if log_sigma_p.requires_grad() {
                    log_sigma_p.accumulate_grad(&g_lp);
                }
            }
            Op::Dropout { x, keep, scale } => {
                if x.requires_grad() {
                    let gx: Vec<f64> = grad
                        .iter()
                        .zip(keep.iter())
                        .map(|(g, &k)| if k { g * scale } else { 0.0 })
                        .collect();
                    x.accumulate_grad(&gx);
                }
            }
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![a],
            Op::ConcatRows(parts) => parts.iter().collect(),
            Op::Softmax { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::CrossEntropyRows { logits, .. } => vec![logits],
            Op::WeightedBceLogits { logits, .. } => vec![logits],
            Op::KlDiagGaussians {
                mu_q,
                log_sigma_q,
                mu_p,
                log_sigma_p,
            } => vec![mu_q, log_sigma_q, mu_p, log_sigma_p],
            Op::Dropout { x, .. } => vec![x],
        }
    }
}

fn acc(t: &Tensor, grad: &[f64]) {
    if t.requires_grad() {
        t.accumulate_grad(grad);
    }
}
