//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! tape is in topological order by construction and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, gelu_grad, gelu_value, softplus, split_axis};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    MaskLast {
        input: Var,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MeanPool {
        input: Var,
        mask: Vec<bool>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    CategoricalCe {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        /// `heads × L × L` attention weights
        probs: Vec<f64>,
    },
    RowNll {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of operations. One tape has a single writer.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    /// Registers a tensor as a leaf. It receives a gradient if
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = tensor.strip_grad_state();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = tensor.strip_grad_state();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies a node's value and gradient into a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone().with_requires_grad(node.requires_grad);
        t.set_grad(node.grad.clone())
            .expect("tape gradients match their node shapes");
        t
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// `x[..., d] + bias[d]`, the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let d = sb[0];
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a fixed array (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                left: self.shape(a).to_vec(),
                right: vec![factors.len()],
            });
        }
        let out = self
            .data(a)
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulConst(a, factors), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("expected a 2-D tensor, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.data(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let len = self.data(a).len();
        if shape.contains(&0) || shape.iter().product::<usize>() != len {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len,
            });
        }
        let out = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: s.len(),
            });
        }
        if len == 0 || start + len > s[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                bound: s[axis],
            });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: s.len(),
            });
        }
        let out = kernels::softmax(self.data(a), &s, axis);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::Softmax { input: a, axis },
            rg,
        ))
    }

    /// Replaces entries along the last axis whose `keep` flag is false by
    /// negative infinity. Used to hide padded keys from attention.
    pub fn mask_last(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.last() != Some(&keep.len()) {
            return Err(TensorError::ShapeMismatch {
                op: "mask_last",
                left: s,
                right: vec![keep.len()],
            });
        }
        let n = keep.len();
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[i % n] { v } else { f64::NEG_INFINITY })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::MaskLast {
                input: a,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: s,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&v| gelu_value(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a), rg)
    }

    /// Mean of the rows of `x[L×d]` whose mask flag is set.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mean_pool",
                left: s,
                right: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_pool",
                reason: "mask selects no positions".into(),
            });
        }
        let d = s[1];
        let src = self.data(x);
        let mut out = vec![0.0; d];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in 0..d {
                out[j] += src[i * d + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![d], out),
            Op::MeanPool {
                input: x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                reason: format!("table must be 2-D, got {s:?}"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                reason: "no ids".into(),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound: v,
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean over labels of `softplus(z) - y z`, i.e. binary cross-entropy on
    /// sigmoid outputs written in log-sigmoid form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `-Σ_j y_j log softmax(z)_j` over a single logit vector.
    pub fn categorical_ce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "categorical_ce",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let probs = kernels::softmax(z, &[z.len()], 0);
        let lse = kernels::log_sum_exp(z);
        let loss = z.iter().zip(targets).map(|(&z, &y)| -y * (z - lse)).sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CategoricalCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets = [(row, class)]` under the
    /// row-wise softmax of `logits[L×V]`.
    pub fn row_nll(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "row_nll",
                reason: format!("logits must be 2-D, got {s:?}"),
            });
        }
        if targets.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "row_nll",
                reason: "no targets".into(),
            });
        }
        let (rows, v) = (s[0], s[1]);
        for &(r, c) in targets {
            if r >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "row_nll",
                    index: r,
                    bound: rows,
                });
            }
            if c >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "row_nll",
                    index: c,
                    bound: v,
                });
            }
        }
        let z = self.data(logits);
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut loss = 0.0;
        for &(r, c) in targets {
            let row = &z[r * v..(r + 1) * v];
            loss += kernels::log_sum_exp(row) - row[c];
            probs.extend(kernels::softmax(row, &[v], 0));
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::RowNll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over packed `L×d`
    /// projections. Head `h` uses columns `h·d/heads .. (h+1)·d/heads`; keys
    /// whose `keep` flag is false get zero weight. Output is the per-head
    /// results side by side, `L×d`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keep: &[bool],
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 2 || s[0] != keep.len() {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: s,
                right: vec![keep.len()],
            });
        }
        let (l, d) = (s[0], s[1]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("width {d} is not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let col = h * dh;
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            // S = Q_h K_hᵀ
            kernels::gemm_strided(
                l,
                dh,
                l,
                &qd[col..],
                (d, 1),
                &kd[col..],
                (1, d),
                p,
                (l, 1),
                0.0,
            );
            for row in p.chunks_mut(l) {
                for (x, &kept) in row.iter_mut().zip(keep) {
                    *x = if kept { *x * scale } else { f64::NEG_INFINITY };
                }
            }
            let soft = kernels::softmax(p, &[l, l], 1);
            p.copy_from_slice(&soft);
            // O_h = P V_h
            kernels::gemm_strided(
                l,
                l,
                dh,
                p,
                (l, 1),
                &vd[col..],
                (d, 1),
                &mut out[col..],
                (d, 1),
                0.0,
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor::from_parts(vec![l, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the gradient of
    /// every node that requires one. Gradients add onto whatever is already
    /// stored; call [`Tape::zero_grad`] to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        // Seed into a scratch slot so gradients already accumulated on the
        // loss node are kept separate from this sweep's contributions.
        let mut pending: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (input, contrib) in self.backward_rule(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::new();
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.data(*b), true, &mut da, 0.0);
                    res.push((*a, da));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.data(*a), true, g, false, &mut db, 0.0);
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias(x, b) => {
                let d = self.data(*b).len();
                let mut db = vec![0.0; d];
                g.iter().enumerate().for_each(|(i, v)| db[i % d] += v);
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(da).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::MulConst(a, f) => vec![(*a, g.iter().zip(f).map(|(g, f)| g * f).collect())],
            Op::Transpose(a) => {
                let s = self.shape(*a);
                // g has the transposed shape [c, r]
                vec![(*a, kernels::transpose(g, s[1], s[0]))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut grads: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.data(*v).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let chunk = self.shape(*v)[*axis] * inner;
                        grads[k].extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                inputs.iter().copied().zip(grads).collect()
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input);
                let (outer, n, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.data(*input).len()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = o * n * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                vec![(*input, dx)]
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| out[at(i)] * g[at(i)]).sum();
                        for i in 0..n {
                            dx[at(i)] = out[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![(*input, dx)]
            }
            Op::MaskLast { input, keep } => {
                let n = keep.len();
                let dx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if keep[i % n] { v } else { 0.0 })
                    .collect();
                vec![(*input, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.data(*gamma);
                let d = gm.len();
                let rows = g.len() / d;
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Gelu(a) => {
                let dx = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| g * gelu_grad(x))
                    .collect();
                vec![(*a, dx)]
            }
            Op::MeanPool { input, mask } => {
                let d = g.len();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut dx = vec![0.0; mask.len() * d];
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..d {
                        dx[i * d + j] = g[j] / count;
                    }
                }
                vec![(*input, dx)]
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.data(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let s = self.shape(*q);
                let (l, d) = (s[0], s[1]);
                let dh = d / heads;
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![0.0; l * d];
                let mut dk = vec![0.0; l * d];
                let mut dv = vec![0.0; l * d];
                let mut ds = vec![0.0; l * l];
                for h in 0..*heads {
                    let col = h * dh;
                    let p = &probs[h * l * l..(h + 1) * l * l];
                    // dP = G_h V_hᵀ
                    kernels::gemm_strided(
                        l,
                        dh,
                        l,
                        &g[col..],
                        (d, 1),
                        &vd[col..],
                        (1, d),
                        &mut ds,
                        (l, 1),
                        0.0,
                    );
                    for (ds_row, p_row) in ds.chunks_mut(l).zip(p.chunks(l)) {
                        let dot: f64 = ds_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                        for (x, &pv) in ds_row.iter_mut().zip(p_row) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h, dK_h = dSᵀ Q_h, dV_h = Pᵀ G_h
                    kernels::gemm_strided(
                        l,
                        l,
                        dh,
                        &ds,
                        (l, 1),
                        &kd[col..],
                        (d, 1),
                        &mut dq[col..],
                        (d, 1),
                        0.0,
                    );
                    kernels::gemm_strided(
                        l,
                        l,
                        dh,
                        &ds,
                        (1, l),
                        &qd[col..],
                        (d, 1),
                        &mut dk[col..],
                        (d, 1),
                        0.0,
                    );
                    kernels::gemm_strided(
                        l,
                        l,
                        dh,
                        p,
                        (1, l),
                        &g[col..],
                        (d, 1),
                        &mut dv[col..],
                        (d, 1),
                        0.0,
                    );
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.data(*a).len()])],
            Op::Mean(a) => {
                let n = self.data(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::BceWithLogits { logits, targets } => {
                let m = targets.len() as f64;
                let dz = self
                    .data(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / m)
                    .collect();
                vec![(*logits, dz)]
            }
            Op::CategoricalCe {
                logits,
                targets,
                probs,
            } => {
                let total: f64 = targets.iter().sum();
                let dz = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| g[0] * (total * p - y))
                    .collect();
                vec![(*logits, dz)]
            }
            Op::RowNll {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let t = targets.len() as f64;
                let mut dz = vec![0.0; self.data(*logits).len()];
                for (k, &(r, c)) in targets.iter().enumerate() {
                    let p = &probs[k * v..(k + 1) * v];
                    for j in 0..v {
                        let y = if j == c { 1.0 } else { 0.0 };
                        dz[r * v + j] += g[0] * (p[j] - y) / t;
                    }
                }
                vec![(*logits, dz)]
            }
        }
    }
}
