//! Reverse-mode gradient tape.
//!
//! Operations append nodes in evaluation order, so the node list is already
//! a topological order and the backward pass simply walks it in reverse.

use std::sync::Arc;

use super::attention::{self, AttnDims};
use super::broadcast::{broadcast, Bcast};
use super::kernels;
use super::tensor::rows_cols;
use super::{Rng, Real, Tensor};
use crate::fourier::MixingPlan;
use crate::{par, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Scale,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum MatMulLayout {
    /// `(.., m, k) x (k, n)`, lhs leading dims flattened into rows.
    Flat { rows: usize, k: usize, n: usize },
    Batched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_bcast: bool,
    },
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, layout: MatMulLayout },
    Add { a: Var, b: Var, ma: Bcast, mb: Bcast },
    Mul { a: Var, b: Var, ma: Bcast, mb: Bcast },
    Scale { a: Var, s: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<T> },
    FourierMix { x: Var, plan: Arc<MixingPlan<T>>, batch: usize },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, causal: bool, probs: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The recorded computation for one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a trainable leaf. Leaves the loss does not reach get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on every backward pass.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Matrix product over the trailing two dimensions.
    ///
    /// Supported layouts: `(.., m, k) x (k, n)`, equal leading dimensions on
    /// both sides, or a 2-D lhs broadcast against a batched rhs.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (layout, out, mut shape) = if lead_b.is_empty() {
            let rows = lead_a.iter().product::<usize>() * m;
            let out = kernels::gemm(self.data(a), false, self.data(b), false, rows, k, n);
            (MatMulLayout::Flat { rows, k, n }, out, lead_a.to_vec())
        } else if lead_a == lead_b || lead_a.is_empty() {
            let batch: usize = lead_b.iter().product();
            let a_bcast = lead_a.is_empty();
            let a_stride = if a_bcast { 0 } else { m * k };
            let out =
                kernels::gemm_batched(self.data(a), false, a_stride, self.data(b), false, k * n, batch, m, k, n);
            (
                MatMulLayout::Batched {
                    batch,
                    m,
                    k,
                    n,
                    a_bcast,
                },
                out,
                lead_b.to_vec(),
            )
        } else {
            return Err(err());
        };
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, layout }, rg))
    }

    /// Pointwise op. `Add`/`Mul` broadcast numpy-style against `y`;
    /// `Scale` multiplies by `scalar`; `Relu`/`Sigmoid` ignore both.
    pub fn elementwise(&mut self, kind: Elementwise, x: Var, y: Option<Var>, scalar: T) -> Result<Var> {
        let need = |y: Option<Var>| y.ok_or_else(|| Error::InvalidArgument(format!("{kind:?} needs a second operand")));
        match kind {
            Elementwise::Add => self.add(x, need(y)?),
            Elementwise::Mul => self.mul(x, need(y)?),
            Elementwise::Scale => Ok(self.scale(x, scalar)),
            Elementwise::Relu => Ok(self.relu(x)),
            Elementwise::Sigmoid => Ok(self.sigmoid(x)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |ma, mb| Op::Add { a, b, ma, mb })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |ma, mb| Op::Mul { a, b, ma, mb })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Bcast, Bcast) -> Op<T>,
    ) -> Result<Var> {
        let (shape, ma, mb) = broadcast(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let out = match (&ma, &mb) {
            (Bcast::Identity, Bcast::Identity) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(da[ma.index(i)], db[mb.index(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op(ma, mb), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, s }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid { a }, rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.data(a).to_vec();
        if inner == 1 {
            kernels::softmax_rows(&mut out, len);
        } else {
            let mut lane = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for (t, l) in lane.iter_mut().enumerate() {
                        *l = out[base + t * inner];
                    }
                    kernels::softmax_in_place(&mut lane);
                    for (t, &l) in lane.iter().enumerate() {
                        out[base + t * inner] = l;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Standardizes each position over the last dimension, then applies
    /// `gamma * xhat + beta`. `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if cols == 0 || shape.is_empty() {
            return Err(Error::InvalidArgument("layer_norm over an empty last dimension".into()));
        }
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let n = T::from_usize(cols).unwrap();
        let xs = self.data(x);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let per = (4096 / cols).max(1);
        par::for_each_chunk_pair_mut(&mut xhat, per * cols, &mut rstd, per, |blk, xh, rs| {
            for (r, (row_hat, rs)) in xh.chunks_exact_mut(cols).zip(rs.iter_mut()).enumerate() {
                let src = &xs[(blk * per + r) * cols..(blk * per + r + 1) * cols];
                let mean = src.iter().copied().sum::<T>() / n;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                *rs = inv;
                for (h, &v) in row_hat.iter_mut().zip(src) {
                    *h = (v - mean) * inv;
                }
            }
        });
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = xhat
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| g * h + b))
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `(V, E)` table; the result has shape `ids_shape + [E]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::InvalidArgument(format!("embedding table must be 2-D, got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "ids shape {ids_shape:?} does not match {} ids",
                ids.len()
            )));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        let tab = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::IdOutOfRange {
                    what: "embedding",
                    id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&tab[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over every position of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (rows, vocab) = rows_cols(self.shape(logits));
        if targets.len() != rows || self.shape(logits).len() < 2 {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::IdOutOfRange {
                what: "target",
                id: bad as usize,
                limit: vocab,
            });
        }
        let (probs, losses) = softmax_and_nll(self.data(logits), targets, vocab);
        let total: T = losses.iter().copied().sum();
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Real part of the sequence-axis DFT of a `(B, N, E)` tensor.
    pub fn fourier_mix(&mut self, x: Var, plan: &Arc<MixingPlan<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidArgument(format!("fourier_mix expects (B, N, E), got {shape:?}")));
        }
        let out = plan.apply(self.data(x), shape[0], shape[1], shape[2])?;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape.clone(), out)?,
            Op::FourierMix {
                x,
                plan: Arc::clone(plan),
                batch: shape[0],
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over projected `q (B,Lq,H*K)`,
    /// `k`/`v (B,Lk,H*K)`; returns `(B, Lq, H*K)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible into {heads} heads",
                sq[2]
            )));
        }
        let dims = AttnDims {
            batch: sq[0],
            q_len: sq[1],
            kv_len: sk[1],
            heads,
            head_dim: sq[2] / heads,
        };
        let (out, probs) = attention::forward(self.data(q), self.data(k), self.data(v), dims, causal);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(sq, out)?,
            Op::Attention {
                q,
                k,
                v,
                dims,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("dropout", self.shape(a), &[mask.len()]));
        }
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::from_usize(t.len().max(1)).unwrap();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Accumulates d(loss)/d(node) in reverse recording order and returns the
    /// gradients of every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape().to_vec()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, layout } => {
                let (da, db) = (self.data(*a), self.data(*b));
                match *layout {
                    MatMulLayout::Flat { rows, k, n } => {
                        if self.rg(*a) {
                            acc(*a, kernels::gemm(g, false, db, true, rows, n, k));
                        }
                        if self.rg(*b) {
                            acc(*b, kernels::gemm(da, true, g, false, k, rows, n));
                        }
                    }
                    MatMulLayout::Batched {
                        batch,
                        m,
                        k,
                        n,
                        a_bcast,
                    } => {
                        if self.rg(*a) {
                            let per = kernels::gemm_batched(g, false, m * n, db, true, k * n, batch, m, n, k);
                            if a_bcast {
                                let mut sum = vec![T::zero(); m * k];
                                for chunk in per.chunks_exact(m * k) {
                                    for (s, &c) in sum.iter_mut().zip(chunk) {
                                        *s += c;
                                    }
                                }
                                acc(*a, sum);
                            } else {
                                acc(*a, per);
                            }
                        }
                        if self.rg(*b) {
                            let a_stride = if a_bcast { 0 } else { m * k };
                            acc(
                                *b,
                                kernels::gemm_batched(da, true, a_stride, g, false, m * n, batch, k, m, n),
                            );
                        }
                    }
                }
            }
            Op::Add { a, b, ma, mb } => {
                acc(*a, reduce_to(g, ma, self.value(*a).len()));
                acc(*b, reduce_to(g, mb, self.value(*b).len()));
            }
            Op::Mul { a, b, ma, mb } => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let ga: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * db[mb.index(i)]).collect();
                    acc(*a, reduce_to(&ga, ma, da.len()));
                }
                if self.rg(*b) {
                    let gb: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * da[ma.index(i)]).collect();
                    acc(*b, reduce_to(&gb, mb, db.len()));
                }
            }
            Op::Scale { a, s } => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::Relu { a } => {
                let x = self.data(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect());
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let idx = |t: usize| base + t * inner;
                        let dotp: T = (0..*len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..*len {
                            dx[idx(t)] = y[idx(t)] * (g[idx(t)] - dotp);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).len();
                let gam = self.data(*gamma);
                if self.rg(*x) {
                    let n = T::from_usize(cols).unwrap();
                    let mut dx = vec![T::zero(); g.len()];
                    let per = (4096 / cols).max(1);
                    par::for_each_chunk_mut(&mut dx, per * cols, |blk, out| {
                        for (r, dxr) in out.chunks_exact_mut(cols).enumerate() {
                            let row = blk * per + r;
                            let gr = &g[row * cols..(row + 1) * cols];
                            let hr = &xhat[row * cols..(row + 1) * cols];
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for c in 0..cols {
                                let d = gr[c] * gam[c];
                                m1 += d;
                                m2 += d * hr[c];
                            }
                            m1 /= n;
                            m2 /= n;
                            for c in 0..cols {
                                dxr[c] = rstd[row] * (gr[c] * gam[c] - m1 - hr[c] * m2);
                            }
                        }
                    });
                    acc(*x, dx);
                }
                if self.rg(*gamma) {
                    let prod: Vec<T> = g.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    acc(*gamma, kernels::column_sums(&prod, cols));
                }
                if self.rg(*beta) {
                    acc(*beta, kernels::column_sums(g, cols));
                }
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let dim = ts[1];
                let mut dt = vec![T::zero(); ts[0] * dim];
                for (row, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    kernels::axpy(T::one(), &g[row * dim..(row + 1) * dim], &mut dt[id * dim..(id + 1) * dim]);
                }
                acc(*table, dt);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = probs.len() / targets.len().max(1);
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                let mut d = probs.clone();
                par::for_each_chunk_mut(&mut d, vocab, |r, row| {
                    row[targets[r] as usize] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                });
                acc(*logits, d);
            }
            Op::FourierMix { x, plan, batch } => {
                let s = self.shape(*x);
                // The cosine matrix is symmetric, so the adjoint is the map itself.
                let dx = plan.apply(g, *batch, s[1], s[2]).expect("plan matches recorded shape");
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                causal,
                probs,
            } => {
                let (gq, gk, gv) = attention::backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    *dims,
                    *causal,
                );
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::Dropout { a, mask } => acc(*a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect()),
            Op::Sum { a } => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean { a } => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / T::from_usize(n.max(1)).unwrap(); n]);
            }
        }
    }
}

/// Sums a broadcast gradient back down to the operand's own size.
fn reduce_to<T: Real>(g: &[T], map: &Bcast, len: usize) -> Vec<T> {
    match map {
        Bcast::Identity => g.to_vec(),
        _ => {
            let mut out = vec![T::zero(); len];
            for (i, &v) in g.iter().enumerate() {
                out[map.index(i)] += v;
            }
            out
        }
    }
}

/// Row softmax plus per-row negative log-likelihood, via log-sum-exp.
pub(crate) fn softmax_and_nll<T: Real>(logits: &[T], targets: &[u32], vocab: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = logits.to_vec();
    let mut losses = vec![T::zero(); targets.len()];
    let per = ((1 << 16) / vocab.max(1)).max(1);
    par::for_each_chunk_pair_mut(&mut probs, per * vocab, &mut losses, per, |blk, p, l| {
        for (r, (row, loss)) in p.chunks_exact_mut(vocab).zip(l.iter_mut()).enumerate() {
            let t = targets[blk * per + r] as usize;
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter() {
                total += (*v - max).exp();
            }
            let lse = max + total.ln();
            *loss = lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
    });
    (probs, losses)
}
