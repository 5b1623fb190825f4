// Wengert-list reverse mode. Every op appends a node holding its output value
// and enough saved state to run its vector-Jacobian product; `backward` walks
// the list once in reverse, accumulating into nodes that require a gradient.

use std::sync::Arc;

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Softmax {
        z: Var,
        groups: Vec<usize>,
        n_groups: usize,
    },
    MeanPoolSpatial {
        x: Var,
        positions: usize,
        channels: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        out_chunk: usize,
    },
    Reshape {
        x: Var,
    },
    CircularConv {
        a: Var,
        b: Var,
        d: usize,
    },
    CountSketch {
        x: Var,
        hash: Arc<[usize]>,
        sign: Arc<[f64]>,
        d: usize,
    },
    SignedSqrt {
        x: Var,
        eps: f64,
    },
    L2Normalize {
        x: Var,
        d: usize,
        norms: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        w: Var,
        t: usize,
        d: usize,
    },
    Film {
        f: Var,
        gamma: Var,
        beta: Var,
        positions: usize,
        channels: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape is a single-threaded unit of work: build it with a forward pass,
/// call [`Tape::backward`] once, then read gradients with [`Tape::grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Batch statistics produced by a train-mode batch normalization.
pub type BatchStats = (Tensor, Tensor);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, or `None` when nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[v.0].value))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return dim_err("matmul", ad, bd);
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return dim_err(op, self.dims(a), self.dims(b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor {
            shape: av.shape.clone(),
            data: av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// `x[..., n] + b[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xd, bd) = (self.dims(x), self.dims(b));
        if bd.len() != 1 || xd.is_empty() || xd[xd.len() - 1] != bd[0] {
            return dim_err("add_bias", xd, bd);
        }
        let n = bd[0];
        let bias = self.value(b).data();
        let mut value = self.value(x).clone();
        for row in value.data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so downstream finiteness checks see it
        let value = self.value(x).map(|v| if v <= 0.0 { 0.0 } else { v });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh { x }, &[x])
    }

    /// Odd, continuously differentiable square root:
    /// `sign(x) * (sqrt(|x| + eps) - sqrt(eps))`.
    pub fn signed_sqrt(&mut self, x: Var, eps: f64) -> Var {
        let s0 = eps.sqrt();
        let value = self
            .value(x)
            .map(|v| v.signum() * ((v.abs() + eps).sqrt() - s0));
        self.push(value, Op::SignedSqrt { x, eps }, &[x])
    }

    /// Row-wise `x / sqrt(|x|^2 + eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.dims().is_empty() {
            return dim_err("l2_normalize", xv.dims(), &[]);
        }
        let d = xv.shape.last();
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(value.len() / d);
        for row in value.data.chunks_mut(d) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(value, Op::L2Normalize { x, d, norms }, &[x]))
    }

    // ---- reductions and normalizers --------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(value, Op::Mean { x }, &[x])
    }

    /// Softmax normalized jointly over `axes`. Cells where `keep` is false are
    /// excluded: they output zero and receive zero gradient. A group with no
    /// kept cell outputs all zeros.
    pub fn softmax(&mut self, z: Var, axes: &[usize], keep: Option<&[bool]>) -> Result<Var> {
        let dims = self.dims(z).to_vec();
        if axes.is_empty() || axes.iter().any(|&a| a >= dims.len()) {
            return dim_err("softmax", &dims, axes);
        }
        let n = self.value(z).len();
        if let Some(k) = keep {
            if k.len() != n {
                return dim_err("softmax mask", &dims, &[k.len()]);
            }
        }
        let (groups, n_groups) = softmax_groups(&dims, axes);
        let zv = self.value(z).data();
        let mut maxes = vec![f64::NEG_INFINITY; n_groups];
        for i in 0..n {
            if keep.is_none_or(|k| k[i]) {
                maxes[groups[i]] = maxes[groups[i]].max(zv[i]);
            }
        }
        let mut out = vec![0.0; n];
        let mut sums = vec![0.0; n_groups];
        for i in 0..n {
            if keep.is_none_or(|k| k[i]) {
                let e = (zv[i] - maxes[groups[i]]).exp();
                out[i] = e;
                sums[groups[i]] += e;
            }
        }
        for i in 0..n {
            if sums[groups[i]] > 0.0 {
                out[i] /= sums[groups[i]];
            }
        }
        let value = Tensor::new(dims, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                z,
                groups,
                n_groups,
            },
            &[z],
        ))
    }

    /// Per-channel mean over the two axes preceding the last: `[..., H, W, D] -> [..., D]`.
    pub fn mean_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let r = dims.len();
        if r < 3 {
            return dim_err("mean_pool_spatial", &dims, &[]);
        }
        let (positions, channels) = (dims[r - 3] * dims[r - 2], dims[r - 1]);
        let groups = self.value(x).len() / (positions * channels);
        let xv = self.value(x).data();
        let mut out = vec![0.0; groups * channels];
        for g in 0..groups {
            let acc = &mut out[g * channels..(g + 1) * channels];
            for p in 0..positions {
                let base = (g * positions + p) * channels;
                for (a, &v) in acc.iter_mut().zip(&xv[base..base + channels]) {
                    *a += v;
                }
            }
            let inv = 1.0 / positions as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let mut out_dims = dims[..r - 3].to_vec();
        out_dims.push(channels);
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push(
            value,
            Op::MeanPoolSpatial {
                x,
                positions,
                channels,
            },
            &[x],
        ))
    }

    /// `x[..., T, D]` weighted by `w[..., T]` and summed over T, giving `[..., D]`.
    pub fn weighted_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        let r = xd.len();
        if r < 2 || wd.len() != r - 1 || xd[..r - 1] != wd[..] {
            return dim_err("weighted_sum", &xd, &wd);
        }
        let (t, d) = (xd[r - 2], xd[r - 1]);
        let groups = self.value(w).len() / t;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let acc = &mut out[g * d..(g + 1) * d];
            for s in 0..t {
                let weight = wv[g * t + s];
                let base = (g * t + s) * d;
                for (a, &v) in acc.iter_mut().zip(&xv[base..base + d]) {
                    *a += weight * v;
                }
            }
        }
        let mut out_dims = xd[..r - 2].to_vec();
        out_dims.push(d);
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push(value, Op::WeightedSum { x, w, t, d }, &[x, w]))
    }

    /// Per-channel affine modulation `gamma * f + beta`, with
    /// `f: [..., H, W, C]` and `gamma, beta: [..., C]` sharing leading axes.
    pub fn film(&mut self, f: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (fd, gd, bd) = (
            self.dims(f).to_vec(),
            self.dims(gamma).to_vec(),
            self.dims(beta).to_vec(),
        );
        let r = fd.len();
        if r < 3
            || gd != bd
            || gd.len() != r - 2
            || fd[..r - 3] != gd[..r - 3]
            || fd[r - 1] != gd[r - 3]
        {
            return dim_err("film", &fd, &gd);
        }
        let channels = fd[r - 1];
        let positions = fd[r - 3] * fd[r - 2];
        let groups = self.value(gamma).len() / channels;
        let (fv, gv, bv) = (
            self.value(f).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![0.0; fv.len()];
        for g in 0..groups {
            let gam = &gv[g * channels..(g + 1) * channels];
            let bet = &bv[g * channels..(g + 1) * channels];
            for p in 0..positions {
                let base = (g * positions + p) * channels;
                for c in 0..channels {
                    out[base + c] = gam[c] * fv[base + c] + bet[c];
                }
            }
        }
        let value = Tensor::new(fd, out)?;
        Ok(self.push(
            value,
            Op::Film {
                f,
                gamma,
                beta,
                positions,
                channels,
            },
            &[f, gamma, beta],
        ))
    }

    /// Batch normalization over the rows of `x: [B, D]`.
    ///
    /// With `running = None` the batch statistics are used (biased variance)
    /// and returned so the caller can fold them into running estimates.
    /// With `running = Some((mean, var))` those fixed statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
        running: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 2 || self.dims(scale) != [xd[1]] || self.dims(shift) != [xd[1]] {
            return dim_err("batch_norm", &xd, self.dims(scale));
        }
        let (b, d) = (xd[0], xd[1]);
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.dims() != [d] || v.dims() != [d] {
                    return dim_err("batch_norm running stats", &xd, m.dims());
                }
                (m.data().to_vec(), v.data().to_vec(), false)
            }
            None => {
                if b < 2 {
                    return Err(Error::Config(
                        "batch normalization in train mode needs at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![0.0; d];
                for row in xv.chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; d];
                for row in xv.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= b as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (sv, hv) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let xh = (xv[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = xh;
                out[i * d + j] = sv[j] * xh + hv[j];
            }
        }
        let stats = batch_stats.then(|| {
            (
                Tensor::new(vec![d], mean).expect("d > 0"),
                Tensor::new(vec![d], var).expect("d > 0"),
            )
        });
        let value = Tensor::new(xd, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, scale, shift],
        );
        Ok((var_out, stats))
    }

    /// Mean cross-entropy of `logits: [B, N]` against class indices, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ld = self.dims(logits).to_vec();
        if ld.len() != 2 || ld[0] != labels.len() {
            return dim_err("cross_entropy", &ld, &[labels.len()]);
        }
        let (b, n) = (ld[0], ld[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for (i, row) in lv.chunks(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[i]];
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat of an empty part list".into()));
        };
        let fd = self.dims(first).to_vec();
        if axis >= fd.len() {
            return dim_err("concat", &fd, &[axis]);
        }
        let after: usize = fd[axis + 1..].iter().product();
        let outer: usize = fd[..axis].iter().product();
        let mut total_axis = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let pd = self.dims(p);
            if pd.len() != fd.len() || pd[..axis] != fd[..axis] || pd[axis + 1..] != fd[axis + 1..]
            {
                return dim_err("concat", &fd, pd);
            }
            total_axis += pd[axis];
            chunks.push((p, pd[axis] * after));
        }
        let out_chunk: usize = chunks.iter().map(|c| c.1).sum();
        let mut out = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            for &(p, c) in &chunks {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut out_dims = fd.clone();
        out_dims[axis] = total_axis;
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: chunks,
                outer,
            },
            parts,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if axis >= xd.len() || len == 0 || start + len > xd[axis] {
            return dim_err("slice", &xd, &[axis, start, len]);
        }
        let after: usize = xd[axis + 1..].iter().product();
        let outer: usize = xd[..axis].iter().product();
        let in_chunk = xd[axis] * after;
        let out_chunk = len * after;
        let offset = start * after;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            let base = o * in_chunk + offset;
            out.extend_from_slice(&xv[base..base + out_chunk]);
        }
        let mut out_dims = xd;
        out_dims[axis] = len;
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                in_chunk,
                offset,
                out_chunk,
            },
            &[x],
        ))
    }

    // ---- compact bilinear pooling primitives ------------------------------

    /// Circular convolution over the last axis: `c[k] = sum_i a[i] * b[(k - i) mod d]`.
    pub fn circular_conv(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("circular_conv", a, b)?;
        let d = self.value(a).shape.last();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; av.len()];
        for ((ra, rb), rc) in av.chunks(d).zip(bv.chunks(d)).zip(out.chunks_mut(d)) {
            circ_conv_row(ra, rb, rc);
        }
        let value = Tensor::from_shape(self.value(a).shape.clone(), out)?;
        Ok(self.push(value, Op::CircularConv { a, b, d }, &[a, b]))
    }

    /// Count-sketch projection over the last axis: `y[hash[i]] += sign[i] * x[i]`.
    pub fn count_sketch(
        &mut self,
        x: Var,
        hash: Arc<[usize]>,
        sign: Arc<[f64]>,
        d: usize,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let n = hash.len();
        if xd.is_empty() || xd[xd.len() - 1] != n || sign.len() != n || hash.iter().any(|&h| h >= d)
        {
            return dim_err("count_sketch", &xd, &[n, d]);
        }
        let xv = self.value(x).data();
        let rows = xv.len() / n;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for i in 0..n {
                out[r * d + hash[i]] += sign[i] * xv[r * n + i];
            }
        }
        let mut out_dims = xd;
        *out_dims.last_mut().unwrap() = d;
        let value = Tensor::new(out_dims, out)?;
        Ok(self.push(value, Op::CountSketch { x, hash, sign, d }, &[x]))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return dim_err("backward", self.dims(loss), &[]);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contribution),
        }
    }

    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    // g[m,n] . b^T[n,k]
                    let bv = val(b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bv[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    out.push((a, da));
                }
                if wants(b) {
                    // a^T[k,m] . g[m,n]
                    let av = val(a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let aval = av[r * k + c];
                            if aval == 0.0 {
                                continue;
                            }
                            let row = &mut db[c * n..(c + 1) * n];
                            for (d, &gg) in row.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += aval * gg;
                            }
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect()));
                }
                if wants(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect()));
                }
            }
            &Op::Scale { x, c } => out.push((x, g.iter().map(|v| v * c).collect())),
            &Op::AddBias { x, b } => {
                out.push((x, g.to_vec()));
                if wants(b) {
                    let n = self.nodes[b.0].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((b, db));
                }
            }
            &Op::Relu { x } => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&gg, &xv)| if xv > 0.0 { gg } else { 0.0 })
                    .collect(),
            )),
            &Op::Tanh { x: xin } => out.push((
                xin,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&gg, &y)| gg * (1.0 - y * y))
                    .collect(),
            )),
            &Op::SignedSqrt { x, eps } => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&gg, &xv)| gg * 0.5 / (xv.abs() + eps).sqrt())
                    .collect(),
            )),
            Op::L2Normalize { x, d, norms } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = r * d..(r + 1) * d;
                    let dot: f64 = y[s.clone()]
                        .iter()
                        .zip(&g[s.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in s {
                        dx[j] = (g[j] - y[j] * dot) / n;
                    }
                }
                out.push((*x, dx));
            }
            &Op::Sum { x } => {
                let n = self.nodes[x.0].value.len();
                out.push((x, vec![g[0]; n]));
            }
            &Op::Mean { x } => {
                let n = self.nodes[x.0].value.len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            Op::Softmax {
                z,
                groups,
                n_groups,
            } => {
                let y = node.value.data();
                let mut dots = vec![0.0; *n_groups];
                for j in 0..y.len() {
                    dots[groups[j]] += g[j] * y[j];
                }
                out.push((
                    *z,
                    (0..y.len())
                        .map(|j| y[j] * (g[j] - dots[groups[j]]))
                        .collect(),
                ));
            }
            &Op::MeanPoolSpatial {
                x,
                positions,
                channels,
            } => {
                let n = self.nodes[x.0].value.len();
                let inv = 1.0 / positions as f64;
                let mut dx = vec![0.0; n];
                for (gi, grow) in g.chunks(channels).enumerate() {
                    for p in 0..positions {
                        let base = (gi * positions + p) * channels;
                        for c in 0..channels {
                            dx[base + c] = grow[c] * inv;
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::WeightedSum { x, w, t, d } => {
                let (xv, wv) = (val(x), val(w));
                let groups = wv.len() / t;
                if wants(x) {
                    let mut dx = vec![0.0; xv.len()];
                    for gi in 0..groups {
                        for s in 0..t {
                            let weight = wv[gi * t + s];
                            let base = (gi * t + s) * d;
                            for j in 0..d {
                                dx[base + j] = weight * g[gi * d + j];
                            }
                        }
                    }
                    out.push((x, dx));
                }
                if wants(w) {
                    let mut dw = vec![0.0; wv.len()];
                    for gi in 0..groups {
                        for s in 0..t {
                            let base = (gi * t + s) * d;
                            dw[gi * t + s] = (0..d).map(|j| xv[base + j] * g[gi * d + j]).sum();
                        }
                    }
                    out.push((w, dw));
                }
            }
            &Op::Film {
                f,
                gamma,
                beta,
                positions,
                channels,
            } => {
                let (fv, gv) = (val(f), val(gamma));
                let groups = gv.len() / channels;
                let mut df = vec![0.0; fv.len()];
                let mut dg = vec![0.0; gv.len()];
                let mut db = vec![0.0; gv.len()];
                for gi in 0..groups {
                    for p in 0..positions {
                        let base = (gi * positions + p) * channels;
                        for c in 0..channels {
                            let gg = g[base + c];
                            df[base + c] = gg * gv[gi * channels + c];
                            dg[gi * channels + c] += gg * fv[base + c];
                            db[gi * channels + c] += gg;
                        }
                    }
                }
                out.push((f, df));
                out.push((gamma, dg));
                out.push((beta, db));
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = inv_std.len();
                let b = xhat.len() / d;
                let sv = val(*scale);
                let mut dscale = vec![0.0; d];
                let mut dshift = vec![0.0; d];
                for r in 0..b {
                    for j in 0..d {
                        dscale[j] += g[r * d + j] * xhat[r * d + j];
                        dshift[j] += g[r * d + j];
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; b * d];
                    if *batch_stats {
                        let bf = b as f64;
                        for j in 0..d {
                            // dxhat = g * scale; sum(dxhat) = scale*dshift; sum(dxhat*xhat) = scale*dscale
                            let (s1, s2) = (sv[j] * dshift[j], sv[j] * dscale[j]);
                            for r in 0..b {
                                let dxh = g[r * d + j] * sv[j];
                                dx[r * d + j] =
                                    inv_std[j] / bf * (bf * dxh - s1 - xhat[r * d + j] * s2);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..d {
                                dx[r * d + j] = g[r * d + j] * sv[j] * inv_std[j];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*scale, dscale));
                out.push((*shift, dshift));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let n = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * n + l] -= scale;
                }
                out.push((*logits, dl));
            }
            &Op::Reshape { x } => out.push((x, g.to_vec())),
            Op::Concat { parts, outer } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if wants(p) {
                        let mut dp = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            let base = o * total + offset;
                            dp.extend_from_slice(&g[base..base + c]);
                        }
                        out.push((p, dp));
                    }
                    offset += c;
                }
            }
            &Op::Slice {
                x,
                outer,
                in_chunk,
                offset,
                out_chunk,
            } => {
                let mut dx = vec![0.0; outer * in_chunk];
                for o in 0..outer {
                    let base = o * in_chunk + offset;
                    dx[base..base + out_chunk]
                        .copy_from_slice(&g[o * out_chunk..(o + 1) * out_chunk]);
                }
                out.push((x, dx));
            }
            &Op::CircularConv { a, b, d } => {
                let (av, bv) = (val(a), val(b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for r in 0..av.len() / d {
                    let s = r * d;
                    for k in 0..d {
                        let gk = g[s + k];
                        if gk == 0.0 {
                            continue;
                        }
                        for i in 0..d {
                            let j = (k + d - i) % d;
                            da[s + i] += gk * bv[s + j];
                            db[s + j] += gk * av[s + i];
                        }
                    }
                }
                out.push((a, da));
                out.push((b, db));
            }
            Op::CountSketch { x, hash, sign, d } => {
                let n = hash.len();
                let rows = g.len() / d;
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    for i in 0..n {
                        dx[r * n + i] = sign[i] * g[r * d + hash[i]];
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let aval = a[r * k + c];
            if aval == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += aval * bv;
            }
        }
    }
    out
}

fn circ_conv_row(a: &[f64], b: &[f64], c: &mut [f64]) {
    let d = a.len();
    for (k, ck) in c.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..d {
            s += a[i] * b[(k + d - i) % d];
        }
        *ck = s;
    }
}

// Group id per flat index: the flat position over the axes NOT being normalized.
fn softmax_groups(dims: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let n: usize = dims.iter().product();
    let keep: Vec<bool> = (0..dims.len()).map(|a| !axes.contains(&a)).collect();
    let n_groups: usize = dims
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(d, _)| d)
        .product();
    let mut groups = Vec::with_capacity(n);
    let mut idx = vec![0usize; dims.len()];
    for _ in 0..n {
        let mut gid = 0;
        for (a, &i) in idx.iter().enumerate() {
            if keep[a] {
                gid = gid * dims[a] + i;
            }
        }
        groups.push(gid);
        for a in (0..dims.len()).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    (groups, n_groups)
}
