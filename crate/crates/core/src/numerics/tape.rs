//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes once in
//! reverse order, accumulating gradients additively, and consumes the tape:
//! a second call without [`Tape::reset`] fails with [`Error::TapeConsumed`].

use rand::Rng;

use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where one output row of [`Tape::rows`] comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowPick {
    Zero,
    From { source: usize, row: usize },
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rows {
        sources: Vec<Var>,
        picks: Vec<RowPick>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all records so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s: T = va.data().iter().copied().sum();
        let n = T::from_usize(va.len()).expect("length fits");
        self.push("mean", Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = va.last_dim();
        let mut out = vec![T::zero(); va.len()];
        for (x, o) in va.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::softmax_row(x, o);
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let vx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::from_usize(d).expect("dim fits");
        let rows = vx.rows();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Index {
                context: "slice_cols",
                index: end,
                bound: c + 1,
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![r, w], out)?,
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Splits `[L, H]` into `heads` column blocks of width `H / heads`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Vec<Var>> {
        let (_, c) = self.dims2(x, "split_heads")?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: self.shape(x).to_vec(),
                rhs: vec![heads],
            });
        }
        let w = c / heads;
        (0..heads)
            .map(|h| self.slice_cols(x, h * w, (h + 1) * w))
            .collect()
    }

    pub fn merge_heads(&mut self, heads: &[Var]) -> Result<Var> {
        self.concat_cols(heads)
    }

    /// Assembles a `[picks.len(), d]` tensor whose rows are gathered from the
    /// last-axis rows of `sources` (all of width `d`) or are zero.
    pub fn rows(&mut self, sources: &[Var], picks: &[RowPick], d: usize) -> Result<Var> {
        for &s in sources {
            if self.value(s).last_dim() != d {
                return Err(Error::Shape {
                    op: "rows",
                    lhs: self.shape(s).to_vec(),
                    rhs: vec![d],
                });
            }
        }
        let mut out = vec![T::zero(); picks.len() * d];
        for (i, pick) in picks.iter().enumerate() {
            if let RowPick::From { source, row } = *pick {
                let s = *sources.get(source).ok_or(Error::Index {
                    context: "rows source",
                    index: source,
                    bound: sources.len(),
                })?;
                let v = self.value(s);
                if row >= v.rows() {
                    return Err(Error::Index {
                        context: "rows",
                        index: row,
                        bound: v.rows(),
                    });
                }
                out[i * d..(i + 1) * d].copy_from_slice(v.row(row));
            }
        }
        let t = Tensor::new(vec![picks.len(), d], out)?;
        self.push(
            "rows",
            t,
            Op::Rows {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
            sources,
        )
    }

    /// Row gather from an embedding table; the gradient scatters additively.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                context: "embedding lookup",
                index: bad,
                bound: v,
            });
        }
        let picks: Vec<RowPick> = ids
            .iter()
            .map(|&row| RowPick::From { source: 0, row })
            .collect();
        self.rows(&[table], &picks, d)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, n) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![b, n],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index {
                context: "cross_entropy target",
                index: bad,
                bound: n,
            });
        }
        let vl = self.value(logits);
        let mut probs = vec![T::zero(); b * n];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            kernels::softmax_row(row, &mut probs[r * n..(r + 1) * n]);
            total = total + kernels::log_sum_exp(row) - row[t];
        }
        let loss = total / T::from_usize(b).expect("batch fits");
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of independent sigmoids against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: T = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let loss = total / T::from_usize(targets.len()).expect("len fits");
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Inverted dropout. Returns `x` itself when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::config(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::from_real(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    /// Propagates gradients from the scalar `loss` back to every node that
    /// requires them. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if wants(*a) {
                    acc(*a, &mut |ga| kernels::matmul_nt_acc(g, vb.data(), m, n, k, ga));
                }
                if wants(*b) {
                    acc(*b, &mut |gb| kernels::matmul_tn_acc(va.data(), g, m, k, n, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = kernels::transpose(g, r, c);
                acc(*a, &mut |ga| add_into(ga, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let d = node.value.last_dim();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o = *o + gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o = *o + gv * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o = *o + gv * *c;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| {
                    for o in ga.iter_mut() {
                        *o = *o + g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = T::from_usize(nodes[a.0].value.len()).expect("len fits");
                acc(*a, &mut |ga| {
                    for o in ga.iter_mut() {
                        *o = *o + g[0] / n;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o = *o + gv * kernels::gelu_grad(xv);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                acc(*a, &mut |ga| {
                    for ((grow, yrow), orow) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let dn = T::from_usize(d).expect("dim fits");
                let gamma = nodes[gain.0].value.data();
                acc(*gain, &mut |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gv), &hv) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o = *o + gv * hv;
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, ((grow, hrow), orow)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dh: Vec<T> = grow.iter().zip(gamma).map(|(&gv, &gm)| gv * gm).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<T>() / dn;
                        for ((o, &a), &h) in orow.iter_mut().zip(&dh).zip(hrow) {
                            *o = *o + inv_std[r] * (a - mean_dh - h * mean_dh_h);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = node.value.last_dim();
                let c = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for (i, grow) in g.chunks(w).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + w], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    acc(p, &mut |gp| {
                        for (i, orow) in gp.chunks_mut(w).enumerate() {
                            add_into(orow, &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Rows { sources, picks } => {
                let d = node.value.last_dim();
                for (s_idx, &s) in sources.iter().enumerate() {
                    acc(s, &mut |gs| {
                        for (i, pick) in picks.iter().enumerate() {
                            if let RowPick::From { source, row } = *pick {
                                if source == s_idx {
                                    add_into(&mut gs[row * d..(row + 1) * d], &g[i * d..(i + 1) * d]);
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = nodes[logits.0].value.last_dim();
                let scale = g[0] / T::from_usize(targets.len()).expect("batch fits");
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * n + j] = gl[r * n + j] + scale * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let x = nodes[logits.0].value.data();
                let scale = g[0] / T::from_usize(targets.len()).expect("len fits");
                acc(*logits, &mut |gl| {
                    for ((o, &xv), &y) in gl.iter_mut().zip(x).zip(targets) {
                        *o = *o + scale * (kernels::sigmoid(xv) - y);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| {
                    for ((o, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o = *o + gv * m;
                    }
                });
            }
        }
    }
}
