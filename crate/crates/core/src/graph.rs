//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every tensor produced during a forward pass, in the order
//! the operations ran. Since an operation can only consume nodes that already
//! exist, node order is a topological order and [`Graph::backward`] is a
//! single reverse sweep: each node's gradient is taken out of the buffer,
//! pushed to its inputs, and dropped. Gradients accumulate additively when a
//! node feeds several consumers.
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`AbsaError::NonFinite`] rather than letting a bad value propagate.

use rand::Rng;

use crate::error::{AbsaError, Result};
use crate::tensor::{gemm, Element, MatMut, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        batch: usize,
        time: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        batch: usize,
        len: usize,
        heads: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskRows {
        x: Var,
        mask: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPool {
        x: Var,
        weights: Vec<T>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Propagate {
        x: Var,
        adj: Tensor<T>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    Scale {
        x: Var,
        factor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation: nodes in creation (topological) order.
///
/// A graph is built for one forward pass and confined to one thread.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the node received no gradient.
    pub fn tensor(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn rows_of<T: Element>(t: &Tensor<T>) -> (usize, usize) {
    let d = t.last_dim();
    let rows = t.numel().checked_div(d).unwrap_or(0);
    (rows, d)
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], var: Var, buf: Vec<T>) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(buf) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(buf),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AbsaError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen leaf: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[.., k] x b[k, n] -> [.., n]`; leading dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() < 2 || bv.ndim() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(AbsaError::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = rows_of(av);
        let n = bv.shape()[1];
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            MatRef::rows(av.data(), 0, k),
            MatRef::rows(bv.data(), 0, n),
            T::zero(),
            MatMut::rows(&mut out, 0, n),
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AbsaError::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add { a, b }, rg)
    }

    /// Adds a 1-D bias along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.ndim() != 1 || bv.numel() != d {
            return Err(AbsaError::dim("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", out, Op::AddBias { x, bias }, rg)
    }

    /// `x w + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push("relu", out, Op::Relu { x }, rg)
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = rows_of(xv);
        if d == 0 {
            return Err(AbsaError::Contract("softmax over an empty dimension".into()));
        }
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax_rows", out, Op::Softmax { x }, rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() || lv.shape()[1] == 0 {
            return Err(AbsaError::dim("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(AbsaError::Label { index, label });
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += lse - (row[label] - max);
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let loss = total / T::from_f64(n as f64);
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Same-padded 1-D convolution over time.
    ///
    /// `x` is `[T, C_in]` or `[B, T, C_in]`, `kernel` is `[k, C_in, C_out]`
    /// with odd `k`, `bias` is `[C_out]`. Positions outside `[0, T)` read as zero.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if kv.ndim() != 3 {
            return Err(AbsaError::dim("conv1d", xv.shape(), kv.shape()));
        }
        let (width, cin, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if width % 2 == 0 {
            return Err(AbsaError::Config(format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        let (batch, time) = match xv.shape() {
            [t, c] if *c == cin => (1, *t),
            [b, t, c] if *c == cin => (*b, *t),
            _ => return Err(AbsaError::dim("conv1d", xv.shape(), kv.shape())),
        };
        if bv.ndim() != 1 || bv.numel() != cout {
            return Err(AbsaError::dim("conv1d", kv.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); batch * time * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bv.data());
        }
        let half = (width / 2) as isize;
        for b in 0..batch {
            for d in 0..width {
                let Some((t0, t1, s)) = conv_range(time, d as isize - half) else {
                    continue;
                };
                gemm(
                    t1 - t0,
                    cin,
                    cout,
                    T::one(),
                    MatRef::rows(xv.data(), (b * time + (t0 as isize + s) as usize) * cin, cin),
                    MatRef::rows(kv.data(), d * cin * cout, cout),
                    T::one(),
                    MatMut::rows(&mut out, (b * time + t0) * cout, cout),
                );
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[x, kernel, bias]);
        self.push(
            "conv1d",
            Tensor::new(shape, out)?,
            Op::Conv1d {
                x,
                kernel,
                bias,
                batch,
                time,
            },
            rg,
        )
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AbsaError::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("dropout", out, Op::Dropout { x, mask }, rg)
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, d) = rows_of(xv);
        if gv.numel() != d || bv.numel() != d {
            return Err(AbsaError::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let (xhat, inv_std) = normalize_rows(xv.data(), rows, d, eps);
        let (g, b) = (gv.data(), bv.data());
        let data = xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention core.
    ///
    /// `q`, `k`, `v` hold `batch * len` rows of width `D` (head `h` owns
    /// columns `h*D/heads .. (h+1)*D/heads`). Keys with `key_mask == false`
    /// receive an additive `-inf` score, i.e. exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], batch: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(AbsaError::dim("attention", qv.shape(), kv.shape()));
        }
        let (rows, d) = rows_of(qv);
        if heads == 0 || d % heads != 0 {
            return Err(AbsaError::Config(format!(
                "hidden size {d} is not divisible by {heads} heads"
            )));
        }
        if batch == 0 || rows % batch != 0 || key_mask.len() != rows {
            return Err(AbsaError::dim("attention", qv.shape(), &[batch, key_mask.len()]));
        }
        let len = rows / batch;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * len * len];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            let mask = &key_mask[b * len..(b + 1) * len];
            for h in 0..heads {
                let off = b * len * d + h * dh;
                let poff = (b * heads + h) * len * len;
                gemm(
                    len,
                    dh,
                    len,
                    scale,
                    MatRef::with_strides(qv.data(), off, d, 1),
                    MatRef::with_strides(kv.data(), off, 1, d),
                    T::zero(),
                    MatMut::rows(&mut probs, poff, len),
                );
                for row in probs[poff..poff + len * len].chunks_mut(len) {
                    masked_softmax(row, mask);
                }
                gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    MatRef::rows(&probs, poff, len),
                    MatRef::with_strides(vv.data(), off, d, 1),
                    T::zero(),
                    MatMut::with_strides(&mut out, off, d, 1),
                );
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                len,
                heads,
            },
            rg,
        )
    }

    /// Attention weights `[batch, heads, len, len]` saved by an attention node.
    pub fn attention_weights(&self, var: Var) -> Option<Tensor<T>> {
        match &self.nodes[var.0].op {
            Op::Attention {
                probs,
                batch,
                len,
                heads,
                ..
            } => Tensor::new(vec![*batch, *heads, *len, *len], probs.clone()).ok(),
            _ => None,
        }
    }

    /// Gathers rows of a `[V, D]` table: output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(AbsaError::dim("embedding", tv.shape(), &[ids.len()]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(AbsaError::dim("embedding", tv.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Multiplies every row (last-dimension vector) by a constant factor.
    pub fn mask_rows(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = rows_of(xv);
        if mask.len() != rows {
            return Err(AbsaError::dim("mask_rows", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * mask[i / d]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("mask_rows", out, Op::MaskRows { x, mask: mask.to_vec() }, rg)
    }

    /// Max over time of `[B, T, C]`, restricted to positions where `mask` is set.
    pub fn max_pool_time(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let [b, t, c] = *xv.shape() else {
            return Err(AbsaError::dim("max_pool_time", xv.shape(), &[mask.len()]));
        };
        if mask.len() != b * t {
            return Err(AbsaError::dim("max_pool_time", xv.shape(), &[mask.len()]));
        }
        let mut out = vec![T::zero(); b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            let valid: Vec<usize> = (0..t).filter(|&ti| mask[bi * t + ti]).collect();
            if valid.is_empty() {
                return Err(AbsaError::Contract(format!(
                    "max pool over an all-padding sequence (batch row {bi})"
                )));
            }
            for ci in 0..c {
                let mut best = valid[0];
                for &ti in &valid[1..] {
                    if xv.data()[(bi * t + ti) * c + ci] > xv.data()[(bi * t + best) * c + ci] {
                        best = ti;
                    }
                }
                out[bi * c + ci] = xv.data()[(bi * t + best) * c + ci];
                argmax[bi * c + ci] = best;
            }
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(&[x]);
        self.push("max_pool_time", out, Op::MaxPool { x, argmax }, rg)
    }

    /// Weighted mean over time of `[B, T, C]`; `weights` is `[B * T]`.
    pub fn mean_pool_time(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let [b, t, c] = *xv.shape() else {
            return Err(AbsaError::dim("mean_pool_time", xv.shape(), &[weights.len()]));
        };
        if weights.len() != b * t {
            return Err(AbsaError::dim("mean_pool_time", xv.shape(), &[weights.len()]));
        }
        let mut norm = weights.to_vec();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let total: T = weights[bi * t..(bi + 1) * t].iter().copied().sum();
            if total <= T::zero() {
                return Err(AbsaError::Contract(format!(
                    "mean pool over an empty mask (batch row {bi})"
                )));
            }
            for ti in 0..t {
                let w = weights[bi * t + ti] / total;
                norm[bi * t + ti] = w;
                if w == T::zero() {
                    continue;
                }
                let row = &xv.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(&[x]);
        self.push("mean_pool_time", out, Op::MeanPool { x, weights: norm }, rg)
    }

    /// Picks rows (last-dimension vectors) of `x`: output `[rows.len(), D]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = rows_of(xv);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(AbsaError::dim("select_rows", xv.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.rg(&[x]);
        self.push("select_rows", out, Op::SelectRows { x, rows: rows.to_vec() }, rg)
    }

    /// Batched left-multiplication by a constant matrix: `adj[b] x[b]`.
    ///
    /// `adj` is `[B, L, L]`, `x` is `[B, L, D]`.
    pub fn propagate(&mut self, adj: Tensor<T>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, l, d) = match (adj.shape(), xv.shape()) {
            ([ab, al, al2], [xb, xl, xd]) if ab == xb && al == al2 && al == xl => (*xb, *xl, *xd),
            _ => return Err(AbsaError::dim("propagate", adj.shape(), xv.shape())),
        };
        let mut out = vec![T::zero(); b * l * d];
        for bi in 0..b {
            gemm(
                l,
                l,
                d,
                T::one(),
                MatRef::rows(adj.data(), bi * l * l, l),
                MatRef::rows(xv.data(), bi * l * d, d),
                T::zero(),
                MatMut::rows(&mut out, bi * l * d, d),
            );
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("propagate", out, Op::Propagate { x, adj }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", out, Op::Reshape { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `sum(x * weights)` against a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != weights.numel() {
            return Err(AbsaError::dim("weighted_sum", xv.shape(), weights.shape()));
        }
        let s: T = xv.data().iter().zip(weights.data()).map(|(&a, &w)| a * w).sum();
        let rg = self.rg(&[x]);
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push("scale", out, Op::Scale { x, factor }, rg)
    }

    /// Piecewise-linear switch points taken by the recorded forward pass:
    /// the sign pattern of every ReLU input and every max-pool argmax.
    ///
    /// Two evaluations with equal signatures lie in the same linear region,
    /// which is what finite-difference checks need.
    pub fn activation_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => sig.extend(self.nodes[x.0].value.data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AbsaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = rows_of(av);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        MatRef::rows(g, 0, n),
                        MatRef::transposed(bv.data(), 0, n),
                        T::zero(),
                        MatMut::rows(&mut da, 0, k),
                    );
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        MatRef::transposed(av.data(), 0, k),
                        MatRef::rows(g, 0, n),
                        T::zero(),
                        MatMut::rows(&mut db, 0, n),
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).numel();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..d {
                        dxr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / T::from_f64(n as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= scale;
                }
                accumulate(grads, *logits, dx);
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                batch,
                time,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (width, cin, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let half = (width / 2) as isize;
                let (batch, time) = (*batch, *time);
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut dk = self.wants(*kernel).then(|| vec![T::zero(); kv.numel()]);
                for b in 0..batch {
                    for d in 0..width {
                        let Some((t0, t1, s)) = conv_range(time, d as isize - half) else {
                            continue;
                        };
                        let len = t1 - t0;
                        let xoff = (b * time + (t0 as isize + s) as usize) * cin;
                        let goff = (b * time + t0) * cout;
                        if let Some(dx) = dx.as_mut() {
                            gemm(
                                len,
                                cout,
                                cin,
                                T::one(),
                                MatRef::rows(g, goff, cout),
                                MatRef::transposed(kv.data(), d * cin * cout, cout),
                                T::one(),
                                MatMut::rows(dx, xoff, cin),
                            );
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm(
                                cin,
                                len,
                                cout,
                                T::one(),
                                MatRef::transposed(xv.data(), xoff, cin),
                                MatRef::rows(g, goff, cout),
                                T::one(),
                                MatMut::rows(dk, d * cin * cout, cout),
                            );
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); cout];
                    for row in g.chunks(cout) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * hr[i];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let df = T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((dxr, gr), hr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for i in 0..d {
                            dxhat[i] = gr[i] * gv[i];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / df;
                        for i in 0..d {
                            dxr[i] = k * (df * dxhat[i] - s1 - hr[i] * s2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                len,
                heads,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = rows_of(qv);
                let (batch, len, heads) = (*batch, *len, *heads);
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut ds = vec![T::zero(); len * len];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * len * d + h * dh;
                        let poff = (b * heads + h) * len * len;
                        // dV = P^T dO
                        gemm(
                            len,
                            len,
                            dh,
                            T::one(),
                            MatRef::transposed(probs, poff, len),
                            MatRef::with_strides(g, off, d, 1),
                            T::zero(),
                            MatMut::with_strides(&mut dv, off, d, 1),
                        );
                        // dP = dO V^T
                        gemm(
                            len,
                            dh,
                            len,
                            T::one(),
                            MatRef::with_strides(g, off, d, 1),
                            MatRef::with_strides(vv.data(), off, 1, d),
                            T::zero(),
                            MatMut::rows(&mut ds, 0, len),
                        );
                        let p = &probs[poff..poff + len * len];
                        for (dsr, pr) in ds.chunks_mut(len).zip(p.chunks(len)) {
                            let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for j in 0..len {
                                dsr[j] = pr[j] * (dsr[j] - dot);
                            }
                        }
                        gemm(
                            len,
                            len,
                            dh,
                            scale,
                            MatRef::rows(&ds, 0, len),
                            MatRef::with_strides(kv.data(), off, d, 1),
                            T::zero(),
                            MatMut::with_strides(&mut dq, off, d, 1),
                        );
                        gemm(
                            len,
                            len,
                            dh,
                            scale,
                            MatRef::transposed(&ds, 0, len),
                            MatRef::with_strides(qv.data(), off, d, 1),
                            T::zero(),
                            MatMut::with_strides(&mut dk, off, d, 1),
                        );
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::MaskRows { x, mask } => {
                let d = node.value.last_dim();
                let dx = g.iter().enumerate().map(|(i, &v)| v * mask[i / d]).collect();
                accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let (t, c) = (xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![T::zero(); xv.numel()];
                for (i, (&gi, &ti)) in g.iter().zip(argmax).enumerate() {
                    let (bi, ci) = (i / c, i % c);
                    dx[(bi * t + ti) * c + ci] += gi;
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanPool { x, weights } => {
                let xv = self.value(*x);
                let (t, c) = (xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![T::zero(); xv.numel()];
                for (row, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let bi = row / t;
                    for ci in 0..c {
                        dx[row * c + ci] = w * g[bi * c + ci];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Propagate { x, adj } => {
                let (b, l) = (adj.shape()[0], adj.shape()[1]);
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); b * l * d];
                for bi in 0..b {
                    gemm(
                        l,
                        l,
                        d,
                        T::one(),
                        MatRef::transposed(adj.data(), bi * l * l, l),
                        MatRef::rows(g, bi * l * d, d),
                        T::zero(),
                        MatMut::rows(&mut dx, bi * l * d, d),
                    );
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedSum { x, weights } => {
                accumulate(grads, *x, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|&v| v * *factor).collect());
            }
        }
    }
}

/// Output rows `[t0, t1)` that read a valid input row at shift `s`.
fn conv_range(time: usize, s: isize) -> Option<(usize, usize, isize)> {
    let t = time as isize;
    let t0 = (-s).max(0);
    let t1 = (t - s).min(t);
    (t1 > t0).then_some((t0 as usize, t1 as usize, s))
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn masked_softmax<T: Element>(row: &mut [T], mask: &[bool]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        // no visible key
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for (v, &m) in row.iter_mut().zip(mask) {
        *v = if m { (*v - max).exp() } else { T::zero() };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Per-row standardization: returns `(xhat, 1/sqrt(var + eps))`.
pub(crate) fn normalize_rows<T: Element>(x: &[T], rows: usize, d: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let df = T::from_f64(d as f64);
    let eps = T::from_f64(eps);
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (xhat, inv_std)
}
