//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value plus whatever
//! the backward rule needs. `backward` walks the tape in reverse and only
//! visits nodes that (transitively) depend on a trainable leaf, so frozen
//! parameters never receive or accumulate gradient.

use std::collections::HashMap;

use super::tensor::{gelu, gelu_grad, matmul, matmul_nt, matmul_tn, softmax_slice};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const RMS_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<Option<usize>>,
    },
    GatherColumn {
        x: Var,
        rows: Vec<usize>,
        col: usize,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    ScatterSum {
        parts: Vec<(Var, Vec<usize>)>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Vec<usize>>,
    },
    Gates {
        scores: Var,
        selected: Vec<Vec<usize>>,
        normalize: bool,
    },
    WeightedSum {
        x: Var,
        coeff: Tensor,
    },
}

/// Layout of a batched causal self-attention call: `batch` sequences of
/// `seq` rows each, split into `heads` column blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Unnamed leaf that receives gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls with the same name
    /// return the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.param_lookup.get(&p.name) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.push((p.name.clone(), v));
        self.param_lookup.insert(p.name.clone(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise RMS normalisation with a learned gain vector.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let d = xv.cols();
        if gv.shape() != [d] {
            return Err(Error::dim("rms_norm", xv.shape(), gv.shape()));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * g;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::dim("softmax_rows", x.shape(), &[0, 0]));
        }
        let mut out = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            softmax_slice(x.row(r), out.row_mut(r));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", x.shape(), &[targets.len()]));
        }
        let vocab = x.cols();
        let mut probs = Tensor::zeros(x.shape());
        let mut total = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            if y >= vocab {
                return Err(Error::OutOfVocab { id: y, vocab });
            }
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[y];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let n = targets.len().max(1) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal multi-head attention on already projected `q`, `k`, `v`
    /// (each `[batch·seq × hidden]`). Rows of different sequences never
    /// attend to each other.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionShape { batch, seq, heads } = shape;
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::dim("causal_attention", qv.shape(), kv.shape()));
        }
        let hidden = qv.cols();
        if qv.rows() != batch * seq || heads == 0 || hidden % heads != 0 {
            return Err(Error::dim(
                "causal_attention",
                qv.shape(),
                &[batch, seq, heads],
            ));
        }
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = Tensor::zeros(qv.shape());
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv.row(b * seq + i)[c0..c0 + dh];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kv.row(b * seq + j)[c0..c0 + dh];
                        *s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let p = &mut probs[pbase + i * seq..pbase + i * seq + i + 1];
                    softmax_slice(&scores[..=i], p);
                    let orow = &mut out.row_mut(b * seq + i)[c0..c0 + dh];
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vv.row(b * seq + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, rows: &[Option<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(&[rows.len(), d]);
        for (r, src) in rows.iter().enumerate() {
            if let Some(s) = *src {
                if s >= xv.rows() {
                    return Err(Error::dim("gather_rows", xv.shape(), &[s]));
                }
                out.row_mut(r).copy_from_slice(xv.row(s));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `[x[rows[0], col], x[rows[1], col], ...]` as an `[n×1]` column.
    pub fn gather_column(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let xv = self.value(x);
        if col >= xv.cols() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::dim("gather_column", xv.shape(), &[rows.len(), col]));
        }
        let data = rows.iter().map(|&r| xv.at(r, col)).collect();
        let out = Tensor::new(vec![rows.len(), 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherColumn {
                x,
                rows: rows.to_vec(),
                col,
            },
            rg,
        ))
    }

    /// Scales row `i` of `x` by `w[i, 0]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape() != [xv.rows(), 1] {
            return Err(Error::dim("mul_rows", xv.shape(), wv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let c = wv.data()[r];
            for o in out.row_mut(r) {
                *o *= c;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::MulRows { x, w }, rg))
    }

    /// Sums each part's rows into an `[n_rows × d]` output at the given
    /// destination rows. Parts are accumulated in the order given.
    pub fn scatter_sum(
        &mut self,
        parts: Vec<(Var, Vec<usize>)>,
        n_rows: usize,
        d: usize,
    ) -> Result<Var> {
        let mut out = Tensor::zeros(&[n_rows, d]);
        let mut rg = false;
        for (v, dest) in &parts {
            let pv = self.value(*v);
            if pv.rank() != 2 || pv.cols() != d || pv.rows() != dest.len() {
                return Err(Error::dim("scatter_sum", pv.shape(), &[dest.len(), d]));
            }
            for (r, &t) in dest.iter().enumerate() {
                if t >= n_rows {
                    return Err(Error::dim("scatter_sum", &[t], &[n_rows]));
                }
                for (o, x) in out.row_mut(t).iter_mut().zip(pv.row(r)) {
                    *o += x;
                }
            }
            rg |= self.rg(*v);
        }
        Ok(self.push(out, Op::ScatterSum { parts }, rg))
    }

    /// Row `v` of the output is the mean of the rows listed in `segments[v]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(&[segments.len(), d]);
        for (s, rows) in segments.iter().enumerate() {
            if rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
                return Err(Error::dim("segment_mean", xv.shape(), &[rows.len()]));
            }
            let inv = 1.0 / rows.len() as f64;
            let orow = out.row_mut(s);
            for &r in rows {
                for (o, v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Dense gate matrix from affinity scores: row `t` keeps the entries in
    /// `selected[t]` (divided by their sum when `normalize`) and zeros the
    /// rest.
    pub fn gates(
        &mut self,
        scores: Var,
        selected: &[Vec<usize>],
        normalize: bool,
    ) -> Result<Var> {
        let s = self.value(scores);
        if s.rank() != 2 || s.rows() != selected.len() {
            return Err(Error::dim("gates", s.shape(), &[selected.len()]));
        }
        let mut out = Tensor::zeros(s.shape());
        for (t, sel) in selected.iter().enumerate() {
            if sel.iter().any(|&i| i >= s.cols()) {
                return Err(Error::dim("gates", s.shape(), sel));
            }
            let norm = if normalize {
                sel.iter().map(|&i| s.at(t, i)).sum::<f64>()
            } else {
                1.0
            };
            for &i in sel {
                out.set(t, i, s.at(t, i) / norm);
            }
        }
        let rg = self.rg(scores);
        Ok(self.push(
            out,
            Op::Gates {
                scores,
                selected: selected.to_vec(),
                normalize,
            },
            rg,
        ))
    }

    /// `Σ x ⊙ coeff` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, coeff: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != coeff.shape() {
            return Err(Error::dim("weighted_sum", xv.shape(), coeff.shape()));
        }
        let total = xv.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, coeff }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dout, &mut grads)?;
            grads[idx] = Some(dout);
        }
        Ok(Gradients {
            by_var: grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        dout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = matmul_nt(dout, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = matmul_tn(self.value(*a), dout)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dout.clone())?;
                self.accumulate(grads, *b, dout.clone())?;
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, dout.scale(*c))?,
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&v, &d)| d * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = xv.cols();
                if self.rg(*gain) {
                    let mut gg = vec![0.0; d];
                    for (r, inv) in inv_rms.iter().enumerate() {
                        for ((acc, dy), xi) in gg.iter_mut().zip(dout.row(r)).zip(xv.row(r)) {
                            *acc += dy * xi * inv;
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::vector(gg))?;
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let (row, dy) = (xv.row(r), dout.row(r));
                        let dot: f64 = (0..d).map(|i| dy[i] * gv[i] * row[i]).sum();
                        let c = inv * inv * inv * dot / d as f64;
                        for (i, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * gv[i] * dy[i] - row[i] * c;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dout.row(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for ((o, p), d) in gx.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - dot);
                    }
                }
                self.accumulate(grads, *a, gx)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = dout.item() / targets.len().max(1) as f64;
                let mut gx = probs.scale(c);
                for (r, &y) in targets.iter().enumerate() {
                    gx.row_mut(r)[y] -= c;
                }
                self.accumulate(grads, *logits, gx)?;
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let mut gt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, d) in gt.row_mut(id).iter_mut().zip(dout.row(r)) {
                        *o += d;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, dout, grads)?,
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for (r, src) in rows.iter().enumerate() {
                    if let Some(s) = *src {
                        for (o, d) in gx.row_mut(s).iter_mut().zip(dout.row(r)) {
                            *o += d;
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::GatherColumn { x, rows, col } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for (r, &src) in rows.iter().enumerate() {
                    gx.data_mut()[src * c + col] += dout.data()[r];
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::MulRows { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    let mut gx = dout.clone();
                    for r in 0..gx.rows() {
                        let c = wv.data()[r];
                        for o in gx.row_mut(r) {
                            *o *= c;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.rg(*w) {
                    let data = (0..xv.rows())
                        .map(|r| xv.row(r).iter().zip(dout.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(vec![xv.rows(), 1], data)?)?;
                }
            }
            Op::ScatterSum { parts } => {
                for (v, dest) in parts {
                    if !self.rg(*v) {
                        continue;
                    }
                    let mut gp = Tensor::zeros(self.value(*v).shape());
                    for (r, &t) in dest.iter().enumerate() {
                        gp.row_mut(r).copy_from_slice(dout.row(t));
                    }
                    self.accumulate(grads, *v, gp)?;
                }
            }
            Op::SegmentMean { x, segments } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (s, rows) in segments.iter().enumerate() {
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for (o, d) in gx.row_mut(r).iter_mut().zip(dout.row(s)) {
                            *o += d * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Gates {
                scores,
                selected,
                normalize,
            } => {
                let s = self.value(*scores);
                let g = &node.value;
                let mut gs = Tensor::zeros(s.shape());
                for (t, sel) in selected.iter().enumerate() {
                    if *normalize {
                        let norm: f64 = sel.iter().map(|&i| s.at(t, i)).sum();
                        let dot: f64 = sel.iter().map(|&i| dout.at(t, i) * g.at(t, i)).sum();
                        for &j in sel {
                            gs.set(t, j, (dout.at(t, j) - dot) / norm);
                        }
                    } else {
                        for &j in sel {
                            gs.set(t, j, dout.at(t, j));
                        }
                    }
                }
                self.accumulate(grads, *scores, gs)?;
            }
            Op::WeightedSum { x, coeff } => {
                self.accumulate(grads, *x, coeff.scale(dout.item()))?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[f64],
        dout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionShape { batch, seq, heads } = shape;
        let dh = qv.cols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let p = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                    let doi = &dout.row(b * seq + i)[c0..c0 + dh];
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vv.row(b * seq + j)[c0..c0 + dh];
                        dp[j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let gvj = &mut gv.row_mut(b * seq + j)[c0..c0 + dh];
                        for (o, d) in gvj.iter_mut().zip(doi) {
                            *o += pij * d;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for (j, &pij) in p.iter().enumerate() {
                        let ds = scale * pij * (dp[j] - dot);
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(b * seq + j)[c0..c0 + dh];
                        let gqi = &mut gq.row_mut(b * seq + i)[c0..c0 + dh];
                        for (o, x) in gqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &qv.row(b * seq + i)[c0..c0 + dh];
                        let gkj = &mut gk.row_mut(b * seq + j)[c0..c0 + dh];
                        for (o, x) in gkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq)?;
        self.accumulate(grads, k, gk)?;
        self.accumulate(grads, v, gv)?;
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; `None` for frozen or unused ones.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(name, gradient)` for every parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }
}
