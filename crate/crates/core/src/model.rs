//! Batched forward pass for dense and hybrid checkpoints.
//!
//! A hybrid layer replaces the dense FFN sub-block with
//! `W_tok · O_tok + W_seg · O_seg` computed on the same normalised input;
//! everything else (embeddings, attention, norms, head) is shared with the
//! dense path.

use crate::checkpoint::{Checkpoint, MoeConfig};
use crate::dense::{ffn, names, FfnVars};
use crate::error::{Error, Result};
use crate::numerics::{AttentionShape, Graph, Tensor, Var};
use crate::segment_moe::{
    compute_capacity, fuse_layer_outputs, partition_segments, route_from_affinity,
    segment_moe_forward, ExpertChoiceAssignment, FusionVars, SegmentationPlan,
};
use crate::token_moe::{compute_token_gates, gate_var, token_moe_forward, GateAssignment};

/// Routing decisions taken by one hybrid layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    pub layer: usize,
    pub gates: GateAssignment,
    pub plan: SegmentationPlan,
    /// `None` when no sample was long enough to form a segment.
    pub experts: Option<ExpertChoiceAssignment>,
}

impl LayerRouting {
    /// Selection sets only; two passes with equal signatures took the same
    /// discrete routing path.
    pub fn signature(&self) -> (Vec<Vec<usize>>, Option<Vec<Vec<usize>>>) {
        (
            self.gates.selected.clone(),
            self.experts.as_ref().map(|e| e.indices.clone()),
        )
    }
}

pub struct ForwardPass {
    pub graph: Graph,
    /// `[B·T × vocab]`, sample-major.
    pub logits: Var,
    /// Per hybrid layer, the tape's `[B·T × N_tok]` gate matrix.
    pub gate_vars: Vec<Var>,
    pub routing: Vec<LayerRouting>,
    pub batch: usize,
    pub seq_len: usize,
}

fn batch_dims(ckpt: &Checkpoint, batch: &[Vec<usize>]) -> Result<(usize, usize)> {
    let b = batch.len();
    let t = batch.first().map_or(0, Vec::len);
    if b == 0 || t == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some(bad) = batch.iter().find(|s| s.len() != t) {
        return Err(Error::dim("forward", &[t], &[bad.len()]));
    }
    if t > ckpt.dense.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: t,
            max: ckpt.dense.max_seq_len,
        });
    }
    let vocab = ckpt.dense.vocab_size;
    if let Some(&id) = batch.iter().flatten().find(|&&id| id >= vocab) {
        return Err(Error::OutOfVocab { id, vocab });
    }
    Ok((b, t))
}

pub fn forward(ckpt: &Checkpoint, batch: &[Vec<usize>]) -> Result<ForwardPass> {
    let (b, t) = batch_dims(ckpt, batch)?;
    let p = &ckpt.params;
    let cfg = &ckpt.dense;
    let mut g = Graph::new();

    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let embed = g.param(p.get(names::EMBED)?);
    let pos = g.param(p.get(names::POS_EMBED)?);
    let tok_e = g.embedding(embed, &ids)?;
    let pos_e = g.embedding(pos, &positions)?;
    let mut x = g.add(tok_e, pos_e)?;

    let shape = AttentionShape {
        batch: b,
        seq: t,
        heads: cfg.num_heads,
    };
    let mut gate_vars = Vec::new();
    let mut routing = Vec::new();
    for l in 0..cfg.num_layers {
        let norm = g.param(p.get(&names::attn_norm(l))?);
        let h = g.rms_norm(x, norm)?;
        let proj = |g: &mut Graph, input: Var, w: &str| -> Result<Var> {
            let wv = g.param(p.get(&names::attn(l, w))?);
            g.matmul(input, wv)
        };
        let q = proj(&mut g, h, "wq")?;
        let k = proj(&mut g, h, "wk")?;
        let v = proj(&mut g, h, "wv")?;
        let a = g.causal_attention(q, k, v, shape)?;
        let attn_out = proj(&mut g, a, "wo")?;
        x = g.add(x, attn_out)?;

        let norm = g.param(p.get(&names::ffn_norm(l))?);
        let h = g.rms_norm(x, norm)?;
        let f = match &ckpt.moe {
            None => {
                let w = FfnVars::bind(&mut g, p, &names::ffn(l))?;
                ffn(&mut g, h, w)?
            }
            Some(moe) => {
                let (out, gates, r) = hybrid_layer(&mut g, ckpt, moe, l, h, b, t)?;
                gate_vars.push(gates);
                routing.push(r);
                out
            }
        };
        x = g.add(x, f)?;
    }
    let norm = g.param(p.get(names::FINAL_NORM)?);
    let x = g.rms_norm(x, norm)?;
    let head = g.param(p.get(names::HEAD)?);
    let logits = g.matmul(x, head)?;
    Ok(ForwardPass {
        graph: g,
        logits,
        gate_vars,
        routing,
        batch: b,
        seq_len: t,
    })
}

fn hybrid_layer(
    g: &mut Graph,
    ckpt: &Checkpoint,
    moe: &MoeConfig,
    l: usize,
    h: Var,
    b: usize,
    t: usize,
) -> Result<(Var, Var, LayerRouting)> {
    let p = &ckpt.params;

    let router = g.param(p.get(&names::token_router(l))?);
    let logits = g.matmul(h, router)?;
    let scores = g.softmax_rows(logits)?;
    let assign = compute_token_gates(g.value(scores), &moe.token, moe.gating)?;
    let gates = gate_var(g, scores, &assign)?;
    let mut experts = vec![FfnVars::bind(g, p, &names::shared(l))?];
    for i in 1..moe.token.num_experts {
        experts.push(FfnVars::bind(g, p, &names::expert(l, i))?);
    }
    let o_tok = token_moe_forward(g, &experts, gates, &assign, h)?;

    let plan = partition_segments(b, t, &moe.segment)?;
    let (o_seg, seg_assign) = if plan.total() == 0 {
        (None, None)
    } else {
        let seg_emb = g.segment_mean(h, &plan.segment_rows())?;
        let router = g.param(p.get(&names::seg_router(l))?);
        let logits = g.matmul(seg_emb, router)?;
        let probs = g.softmax_rows(logits)?;
        let r = compute_capacity(plan.total(), &moe.segment);
        let assign = route_from_affinity(&g.value(probs).transpose()?, r)?;
        let experts = (0..moe.segment.num_experts)
            .map(|i| FfnVars::bind(g, p, &names::seg_expert(l, i)))
            .collect::<Result<Vec<_>>>()?;
        let out = segment_moe_forward(g, &experts, &assign, probs, seg_emb)?;
        (Some(out), Some(assign))
    };

    let fusion = FusionVars {
        w_tok: g.param(p.get(&names::fusion_tok(l))?),
        w_seg: g.param(p.get(&names::fusion_seg(l))?),
    };
    let out = fuse_layer_outputs(g, o_tok, o_seg, &plan, fusion)?;
    Ok((
        out,
        gates,
        LayerRouting {
            layer: l,
            gates: assign,
            plan,
            experts: seg_assign,
        },
    ))
}

/// Logits for a batch of equally long sequences, `[B·T × vocab]`.
pub fn logits(ckpt: &Checkpoint, batch: &[Vec<usize>]) -> Result<Tensor> {
    let pass = forward(ckpt, batch)?;
    Ok(pass.graph.value(pass.logits).clone())
}
