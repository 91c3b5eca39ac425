//! Segment-level MoE with expert-choice routing.
//!
//! Each sample is cut into `P = ⌊T / a⌋` non-overlapping windows of `a`
//! tokens. Window embeddings are token means. A router scores every
//! (expert, segment) pair over the whole batch (`V = B·P` segments) and each
//! expert independently takes its top `r = ⌊V·c / N⌋` segments. Outputs are
//! weighted by the router probability and broadcast back to the tokens of
//! the segment before fusion with the token path.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dense::{ffn, FfnVars};
use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_axis, top_k, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMoEConfig {
    pub num_experts: usize,
    /// Tokens per segment (`a`).
    pub window: usize,
    /// Average experts per segment (`c`).
    pub capacity_factor: f64,
    pub hidden_size: usize,
}

impl SegmentMoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("segment window must be at least 1".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("segment experts must be at least 1".into()));
        }
        if !(self.capacity_factor >= 1.0) || !self.capacity_factor.is_finite() {
            return Err(Error::Config(format!(
                "capacity factor {} must be a finite value >= 1",
                self.capacity_factor
            )));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("segment hidden_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub sample: usize,
    /// Token positions within the sample, half open.
    pub tokens: Range<usize>,
}

/// Window layout for a `B × T` batch. Segment ids run sample-major:
/// `v = sample · P + p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationPlan {
    pub batch: usize,
    pub seq_len: usize,
    pub window: usize,
    pub per_sample: usize,
    pub segments: Vec<Segment>,
    /// Per sample, the trailing positions not covered by any segment.
    pub leftover: Vec<Range<usize>>,
}

impl SegmentationPlan {
    /// `V`.
    pub fn total(&self) -> usize {
        self.segments.len()
    }

    /// Position of segment `v` within its sample.
    pub fn position(&self, v: usize) -> usize {
        v % self.per_sample.max(1)
    }

    /// Flattened (`sample · T + t`) token rows of each segment.
    pub fn segment_rows(&self) -> Vec<Vec<usize>> {
        self.segments
            .iter()
            .map(|s| s.tokens.clone().map(|t| s.sample * self.seq_len + t).collect())
            .collect()
    }

    /// Segment id for each flattened token row; `None` for leftovers.
    pub fn token_segments(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.batch * self.seq_len];
        for (v, s) in self.segments.iter().enumerate() {
            for t in s.tokens.clone() {
                out[s.sample * self.seq_len + t] = Some(v);
            }
        }
        out
    }
}

pub fn partition_segments(
    batch: usize,
    seq_len: usize,
    cfg: &SegmentMoEConfig,
) -> Result<SegmentationPlan> {
    if cfg.window == 0 {
        return Err(Error::Config("segment window must be at least 1".into()));
    }
    let a = cfg.window;
    let per_sample = seq_len / a;
    let mut segments = Vec::with_capacity(batch * per_sample);
    let mut leftover = Vec::with_capacity(batch);
    for sample in 0..batch {
        for p in 0..per_sample {
            segments.push(Segment {
                sample,
                tokens: p * a..(p + 1) * a,
            });
        }
        leftover.push(per_sample * a..seq_len);
    }
    Ok(SegmentationPlan {
        batch,
        seq_len,
        window: a,
        per_sample,
        segments,
        leftover,
    })
}

/// Mean token vector of every segment, `[V × hidden]`. `hidden` may be
/// `[B × T × d]` or already flattened to `[B·T × d]`.
pub fn embed_segments(plan: &SegmentationPlan, hidden: &Tensor) -> Result<Tensor> {
    let rows = plan.batch * plan.seq_len;
    let flat = match hidden.shape() {
        [b, t, d] if *b == plan.batch && *t == plan.seq_len => {
            hidden.clone().reshape(&[rows, *d])?
        }
        [r, _] if *r == rows => hidden.clone(),
        s => return Err(Error::dim("embed_segments", s, &[plan.batch, plan.seq_len])),
    };
    let d = flat.cols();
    let mut out = Tensor::zeros(&[plan.total(), d]);
    for (v, seg_rows) in plan.segment_rows().iter().enumerate() {
        let orow = out.row_mut(v);
        for &r in seg_rows {
            for (o, x) in orow.iter_mut().zip(flat.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / seg_rows.len() as f64;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Expert capacity `r = max(1, ⌊V·c / N⌋)`.
pub fn compute_capacity(num_segments: usize, cfg: &SegmentMoEConfig) -> usize {
    let r = (num_segments as f64 * cfg.capacity_factor / cfg.num_experts as f64).floor();
    (r as usize).max(1)
}

/// The `(I, D, U)` expert-to-segment assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertChoiceAssignment {
    /// `I[i][j]`: j-th segment chosen by expert i, by descending affinity.
    pub indices: Vec<Vec<usize>>,
    /// `D`, `[N × r]`: affinity of each chosen segment.
    pub weights: Tensor,
    pub capacity: usize,
    pub num_segments: usize,
}

impl ExpertChoiceAssignment {
    pub fn num_experts(&self) -> usize {
        self.indices.len()
    }

    /// `U`, `[N × r × V]` with `U[i,j,v] = 1 ⇔ I[i][j] = v`.
    pub fn one_hot(&self) -> Tensor {
        let (n, r, v) = (self.num_experts(), self.capacity, self.num_segments);
        let mut u = Tensor::zeros(&[n, r, v]);
        for (i, row) in self.indices.iter().enumerate() {
            for (j, &seg) in row.iter().enumerate() {
                u.data_mut()[(i * r + j) * v + seg] = 1.0;
            }
        }
        u
    }

    /// How many experts picked each segment.
    pub fn segment_loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.num_segments];
        for row in &self.indices {
            for &v in row {
                loads[v] += 1;
            }
        }
        loads
    }
}

/// Segment-major router probabilities `softmax_expert(seg_emb · W)`,
/// `[V × N]`. The expert-to-segment matrix `G_seg` is its transpose.
pub fn segment_affinity(router: &Tensor, seg_emb: &Tensor) -> Result<Tensor> {
    softmax_axis(&matmul(seg_emb, router)?, 1)
}

/// Top-`r` segments per row of `g_seg` (`[N × V]`).
pub fn route_from_affinity(g_seg: &Tensor, r: usize) -> Result<ExpertChoiceAssignment> {
    let (n, v) = match g_seg.shape() {
        [n, v] => (*n, *v),
        s => return Err(Error::dim("route_from_affinity", s, &[0, 0])),
    };
    if r > v {
        return Err(Error::Capacity { r, segments: v });
    }
    let mut indices = Vec::with_capacity(n);
    let mut weights = Tensor::zeros(&[n, r]);
    for i in 0..n {
        let row = g_seg.row(i);
        let chosen = top_k(row, r)?;
        for (j, &seg) in chosen.iter().enumerate() {
            weights.set(i, j, row[seg]);
        }
        indices.push(chosen);
    }
    Ok(ExpertChoiceAssignment {
        indices,
        weights,
        capacity: r,
        num_segments: v,
    })
}

pub fn expert_choice_route(
    router: &Tensor,
    seg_emb: &Tensor,
    r: usize,
) -> Result<ExpertChoiceAssignment> {
    let probs = segment_affinity(router, seg_emb)?;
    route_from_affinity(&probs.transpose()?, r)
}

/// `O_seg[v] = Σ_{i,j} U[i,j,v] · D[i,j] · FFN_i(seg'_{I[i,j]})`.
///
/// `probs` is the tape's `[V × N]` router output the assignment was derived
/// from, so `D` carries gradient back to the router. Unselected segments get
/// a zero row.
pub fn segment_moe_forward(
    g: &mut Graph,
    experts: &[FfnVars],
    assign: &ExpertChoiceAssignment,
    probs: Var,
    seg_emb: Var,
) -> Result<Var> {
    if experts.len() != assign.num_experts() {
        return Err(Error::dim(
            "segment_moe_forward",
            &[experts.len()],
            &[assign.num_experts()],
        ));
    }
    let (v, d) = (g.value(seg_emb).rows(), g.value(seg_emb).cols());
    if v != assign.num_segments || g.value(probs).shape() != [v, experts.len()] {
        return Err(Error::dim(
            "segment_moe_forward",
            g.value(probs).shape(),
            &[assign.num_segments, experts.len()],
        ));
    }
    let mut parts = Vec::with_capacity(experts.len());
    for (i, chosen) in assign.indices.iter().enumerate() {
        let src: Vec<Option<usize>> = chosen.iter().map(|&s| Some(s)).collect();
        let x_in = g.gather_rows(seg_emb, &src)?;
        let x_out = ffn(g, x_in, experts[i])?;
        let dw = g.gather_column(probs, chosen, i)?;
        let weighted = g.mul_rows(x_out, dw)?;
        parts.push((weighted, chosen.clone()));
    }
    g.scatter_sum(parts, v, d)
}

/// Graph handles for one layer's fusion matrices.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w_tok: Var,
    pub w_seg: Var,
}

/// Per token: `o_tok[t] · W_tok + o_seg[segment(t)] · W_seg`; tokens outside
/// every segment only get the token path. `o_seg` is `None` when the batch
/// has no segments at all.
pub fn fuse_layer_outputs(
    g: &mut Graph,
    o_tok: Var,
    o_seg: Option<Var>,
    plan: &SegmentationPlan,
    w: FusionVars,
) -> Result<Var> {
    let tok = g.matmul(o_tok, w.w_tok)?;
    let Some(o_seg) = o_seg else {
        return Ok(tok);
    };
    if g.value(o_tok).rows() != plan.batch * plan.seq_len {
        return Err(Error::dim(
            "fuse_layer_outputs",
            g.value(o_tok).shape(),
            &[plan.batch, plan.seq_len],
        ));
    }
    let broadcast = g.gather_rows(o_seg, &plan.token_segments())?;
    let seg = g.matmul(broadcast, w.w_seg)?;
    g.add(tok, seg)
}
