//! Token-choice MoE with an always-on shared expert.
//!
//! Expert index 0 is the shared expert. In shared-normalized gating it is
//! selected for every token together with the top `K − 1` routed experts,
//! and the `K` selected affinities are rescaled to sum to one:
//!
//! ```text
//! Norm    = s_shared + Σ top_{K−1}(s_routed)
//! g_{i,t} = s_{i,t} / Norm   for selected i, 0 otherwise
//! ```
//!
//! Vanilla gating keeps the plain top-K affinities without rescaling.

use serde::{Deserialize, Serialize};

use crate::dense::{ffn, FfnVars};
use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_axis, top_k, Graph, Tensor, Var};

pub const SHARED_EXPERT: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingMode {
    Vanilla,
    SharedNormalized,
}

impl std::str::FromStr for GatingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(GatingMode::Vanilla),
            "shared-normalized" => Ok(GatingMode::SharedNormalized),
            other => Err(Error::Config(format!("unknown gating mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMoEConfig {
    /// Total experts including the shared one.
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_size: usize,
}

impl TokenMoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 2 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "token top_k {} must lie in 2..={}",
                self.top_k, self.num_experts
            )));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("token hidden_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-token routing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct GateAssignment {
    pub mode: GatingMode,
    /// Selected experts per token; in shared-normalized mode the shared
    /// expert comes first, routed experts follow in descending affinity.
    pub selected: Vec<Vec<usize>>,
    /// `[T × N]` gate values, exactly zero for unselected experts.
    pub gates: Tensor,
    /// `[T × N]` raw affinities.
    pub scores: Tensor,
    /// Sum of the selected affinities per token (the divisor in
    /// shared-normalized mode).
    pub norm: Vec<f64>,
}

impl GateAssignment {
    pub fn num_tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn num_experts(&self) -> usize {
        self.scores.cols()
    }
}

/// `softmax(x · W)` over the expert axis, `[T × N]`.
pub fn token_affinity_scores(router: &Tensor, x: &Tensor) -> Result<Tensor> {
    softmax_axis(&matmul(x, router)?, 1)
}

/// Expert selection for one token's affinity row.
fn select_experts(row: &[f64], k: usize, mode: GatingMode) -> Result<Vec<usize>> {
    match mode {
        GatingMode::Vanilla => top_k(row, k),
        GatingMode::SharedNormalized => {
            let routed = &row[SHARED_EXPERT + 1..];
            let mut sel = vec![SHARED_EXPERT];
            sel.extend(
                top_k(routed, k - 1)?
                    .into_iter()
                    .map(|i| i + SHARED_EXPERT + 1),
            );
            Ok(sel)
        }
    }
}

pub fn compute_token_gates(
    scores: &Tensor,
    cfg: &TokenMoEConfig,
    mode: GatingMode,
) -> Result<GateAssignment> {
    if scores.rank() != 2 || scores.cols() != cfg.num_experts {
        return Err(Error::dim("compute_token_gates", scores.shape(), &[cfg.num_experts]));
    }
    let min_k = match mode {
        GatingMode::Vanilla => 1,
        GatingMode::SharedNormalized => 2,
    };
    if cfg.top_k < min_k || cfg.top_k > cfg.num_experts {
        return Err(Error::TopK {
            k: cfg.top_k,
            len: cfg.num_experts,
        });
    }
    let mut gates = Tensor::zeros(scores.shape());
    let mut selected = Vec::with_capacity(scores.rows());
    let mut norm = Vec::with_capacity(scores.rows());
    for t in 0..scores.rows() {
        let row = scores.row(t);
        let sel = select_experts(row, cfg.top_k, mode)?;
        let total: f64 = sel.iter().map(|&i| row[i]).sum();
        let divisor = match mode {
            GatingMode::Vanilla => 1.0,
            GatingMode::SharedNormalized => total,
        };
        for &i in &sel {
            gates.set(t, i, row[i] / divisor);
        }
        norm.push(total);
        selected.push(sel);
    }
    Ok(GateAssignment {
        mode,
        selected,
        gates,
        scores: scores.clone(),
        norm,
    })
}

/// Token rows routed to each expert, ascending.
pub fn tokens_per_expert(assign: &GateAssignment) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); assign.num_experts()];
    for (t, sel) in assign.selected.iter().enumerate() {
        for &i in sel {
            rows[i].push(t);
        }
    }
    rows
}

/// Graph form of the gating: returns the `[T × N]` gate matrix recomputed on
/// the tape from `scores` so gradients reach the router.
pub fn gate_var(g: &mut Graph, scores: Var, assign: &GateAssignment) -> Result<Var> {
    g.gates(
        scores,
        &assign.selected,
        assign.mode == GatingMode::SharedNormalized,
    )
}

/// `O_t = Σ_{i selected} g_{i,t} · FFN_i(x_t)`.
///
/// `experts[0]` is the shared expert. `gates` is the tape's `[T × N]` gate
/// matrix for `assign`.
pub fn token_moe_forward(
    g: &mut Graph,
    experts: &[FfnVars],
    gates: Var,
    assign: &GateAssignment,
    x: Var,
) -> Result<Var> {
    if experts.len() != assign.num_experts() {
        return Err(Error::dim(
            "token_moe_forward",
            &[experts.len()],
            &[assign.num_experts()],
        ));
    }
    let (n_tokens, d) = (g.value(x).rows(), g.value(x).cols());
    if n_tokens != assign.num_tokens() {
        return Err(Error::dim("token_moe_forward", g.value(x).shape(), &[assign.num_tokens()]));
    }
    let mut parts = Vec::new();
    for (i, rows) in tokens_per_expert(assign).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let src: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let xi = g.gather_rows(x, &src)?;
        let yi = ffn(g, xi, experts[i])?;
        let gi = g.gather_column(gates, &rows, i)?;
        let weighted = g.mul_rows(yi, gi)?;
        parts.push((weighted, rows));
    }
    g.scatter_sum(parts, n_tokens, d)
}
