//! Next-token and load-balance objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::token_moe::{GateAssignment, SHARED_EXPERT};

/// `−(1/T) Σ_t log softmax(logits_t)[target_t]`.
pub fn ntp_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != targets.len() {
        return Err(Error::dim("ntp_loss", logits.shape(), &[targets.len()]));
    }
    let vocab = logits.cols();
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        if y >= vocab {
            return Err(Error::OutOfVocab { id: y, vocab });
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / targets.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub top_k: usize,
    /// Whether the always-on shared expert contributes an `f·p` term.
    pub include_shared: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub total: f64,
    pub per_layer: Vec<f64>,
    /// Fraction of selections per expert, per layer.
    pub f: Vec<Vec<f64>>,
    /// Mean gate value per expert, per layer.
    pub p: Vec<Vec<f64>>,
}

fn dispatch_fractions(a: &GateAssignment, top_k: usize) -> Vec<f64> {
    let n = a.num_experts();
    let mut counts = vec![0usize; n];
    for sel in &a.selected {
        for &i in sel {
            counts[i] += 1;
        }
    }
    let denom = (top_k * a.num_tokens()) as f64;
    counts.into_iter().map(|c| c as f64 / denom).collect()
}

fn mean_gates(a: &GateAssignment) -> Vec<f64> {
    let (t, n) = (a.num_tokens(), a.num_experts());
    let mut p = vec![0.0; n];
    for r in 0..t {
        for (acc, g) in p.iter_mut().zip(a.gates.row(r)) {
            *acc += g;
        }
    }
    p.into_iter().map(|v| v / t as f64).collect()
}

/// `α · N · Σ_i f_i · p_i` per layer, summed over layers.
pub fn load_balance_loss(history: &[GateAssignment], cfg: &BalanceConfig) -> BalanceStats {
    let mut stats = BalanceStats {
        total: 0.0,
        per_layer: Vec::with_capacity(history.len()),
        f: Vec::with_capacity(history.len()),
        p: Vec::with_capacity(history.len()),
    };
    for a in history {
        let n = a.num_experts();
        let f = dispatch_fractions(a, cfg.top_k);
        let p = mean_gates(a);
        let dot: f64 = (0..n)
            .filter(|&i| cfg.include_shared || i != SHARED_EXPERT)
            .map(|i| f[i] * p[i])
            .sum();
        let loss = cfg.alpha * n as f64 * dot;
        stats.total += loss;
        stats.per_layer.push(loss);
        stats.f.push(f);
        stats.p.push(p);
    }
    stats
}

/// Tape form of [`load_balance_loss`]: the dispatch fractions are constants,
/// gradient flows through the gate values. Returns `None` for an empty
/// history.
pub fn balance_loss_var(
    g: &mut Graph,
    gate_vars: &[Var],
    history: &[GateAssignment],
    cfg: &BalanceConfig,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (&gv, a) in gate_vars.iter().zip(history) {
        let (t, n) = (a.num_tokens(), a.num_experts());
        let f = dispatch_fractions(a, cfg.top_k);
        let mut coeff = Tensor::zeros(&[t, n]);
        for (i, fi) in f.iter().enumerate() {
            if !cfg.include_shared && i == SHARED_EXPERT {
                continue;
            }
            let c = cfg.alpha * n as f64 * fi / t as f64;
            for r in 0..t {
                coeff.set(r, i, c);
            }
        }
        let layer = g.weighted_sum(gv, coeff)?;
        total = Some(match total {
            Some(acc) => g.add(acc, layer)?,
            None => layer,
        });
    }
    Ok(total)
}

/// Per-step training record, serialised as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_ntp: f64,
    pub l_balance: f64,
    pub total: f64,
    pub lr: f64,
    pub per_layer_f: Vec<Vec<f64>>,
    pub per_layer_p: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_moe::GatingMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assignment(selected: Vec<Vec<usize>>, gates: Vec<Vec<f64>>, mode: GatingMode) -> GateAssignment {
        let n = gates[0].len();
        let t = gates.len();
        GateAssignment {
            mode,
            norm: vec![1.0; t],
            scores: Tensor::full(&[t, n], 1.0 / n as f64),
            gates: Tensor::from_rows(&gates).unwrap(),
            selected,
        }
    }

    /// Every expert selected equally often with equal mean gate: cyclic
    /// pairs over 4 experts with gates 1/2.
    fn uniform_history() -> GateAssignment {
        let pairs = [[0, 1], [2, 3], [1, 2], [3, 0]];
        let mut selected = Vec::new();
        let mut gates = Vec::new();
        for t in 0..8 {
            let pr = pairs[t % 4];
            selected.push(pr.to_vec());
            let mut row = vec![0.0; 4];
            row[pr[0]] = 0.5;
            row[pr[1]] = 0.5;
            gates.push(row);
        }
        assignment(selected, gates, GatingMode::SharedNormalized)
    }

    #[test]
    fn ntp_examples() {
        let mut logits = Tensor::full(&[3, 5], -1e3);
        let targets = [4usize, 0, 2];
        for (t, &y) in targets.iter().enumerate() {
            logits.set(t, y, 1e3);
        }
        assert!(ntp_loss(&logits, &targets).unwrap() < 1e-12);
        let uniform = Tensor::zeros(&[4, 512]);
        let l = ntp_loss(&uniform, &[1, 2, 3, 511]).unwrap();
        assert!((l - 512f64.ln()).abs() < 1e-12);
        assert!((l - 6.238).abs() < 1e-3);
        assert!(ntp_loss(&uniform, &[1, 2]).is_err());
    }

    #[test]
    fn ntp_matches_naive_loop_and_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::randn(&[6, 9], 3.0, &mut rng);
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..9)).collect();
        let mut naive = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let z: f64 = logits.row(t).iter().map(|v| v.exp()).sum();
            naive -= (logits.at(t, y).exp() / z).ln();
        }
        naive /= 6.0;
        let l = ntp_loss(&logits, &targets).unwrap();
        assert!((l - naive).abs() < 1e-12);
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let ce = g.cross_entropy(lv, &targets).unwrap();
        assert!((g.value(ce).item() - l).abs() < 1e-15);
    }

    #[test]
    fn uniform_routing_costs_alpha() {
        let cfg = BalanceConfig {
            alpha: 0.01,
            top_k: 2,
            include_shared: true,
        };
        let h = uniform_history();
        let s = load_balance_loss(&[h.clone(), h], &cfg);
        for l in &s.per_layer {
            assert!((l - 0.01).abs() < 1e-15);
        }
        assert!((s.total - 0.02).abs() < 1e-15);
        for f in &s.f[0] {
            assert!((f - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn collapsed_vanilla_routing() {
        // 4 experts, K = 2, every token picks {0, 1} with gates (0.6, 0.3):
        // f = (1/2, 1/2, 0, 0), p = (0.6, 0.3, 0, 0)
        // loss = α · 4 · (0.3 + 0.15) = 1.8 α
        let selected = vec![vec![0, 1]; 5];
        let gates = vec![vec![0.6, 0.3, 0.0, 0.0]; 5];
        let a = assignment(selected, gates, GatingMode::Vanilla);
        let cfg = BalanceConfig {
            alpha: 0.01,
            top_k: 2,
            include_shared: true,
        };
        let s = load_balance_loss(&[a], &cfg);
        assert!((s.total - 0.018).abs() < 1e-15);
        assert!(s.total > cfg.alpha);
    }

    #[test]
    fn zero_alpha_is_zero() {
        let cfg = BalanceConfig {
            alpha: 0.0,
            top_k: 2,
            include_shared: true,
        };
        assert_eq!(load_balance_loss(&[uniform_history()], &cfg).total, 0.0);
    }

    #[test]
    fn excluding_shared_drops_its_term() {
        let h = uniform_history();
        let with = load_balance_loss(
            &[h.clone()],
            &BalanceConfig {
                alpha: 1.0,
                top_k: 2,
                include_shared: true,
            },
        );
        let without = load_balance_loss(
            &[h],
            &BalanceConfig {
                alpha: 1.0,
                top_k: 2,
                include_shared: false,
            },
        );
        let shared_term = 4.0 * with.f[0][0] * with.p[0][0];
        assert!((with.total - without.total - shared_term).abs() < 1e-15);
    }

    #[test]
    fn graph_value_matches_two_pass_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BalanceConfig {
            alpha: 0.01,
            top_k: 2,
            include_shared: true,
        };
        let tc = crate::token_moe::TokenMoEConfig {
            num_experts: 6,
            top_k: 2,
            hidden_size: 4,
        };
        let mut history = Vec::new();
        let mut g = Graph::new();
        let mut vars = Vec::new();
        for _ in 0..3 {
            let x = Tensor::randn(&[10, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let s = crate::token_moe::token_affinity_scores(&w, &x).unwrap();
            let a = crate::token_moe::compute_token_gates(&s, &tc, GatingMode::SharedNormalized).unwrap();
            let sv = g.constant(s);
            vars.push(crate::token_moe::gate_var(&mut g, sv, &a).unwrap());
            history.push(a);
        }
        let stats = load_balance_loss(&history, &cfg);
        let v = balance_loss_var(&mut g, &vars, &history, &cfg).unwrap().unwrap();
        assert!((g.value(v).item() - stats.total).abs() < 1e-12);

        // second, independent pass straight from the selection lists
        let mut brute = 0.0;
        for a in &history {
            let (t, n) = (a.num_tokens() as f64, a.num_experts());
            for i in 0..n {
                let hits = a.selected.iter().filter(|s| s.contains(&i)).count() as f64;
                let gsum: f64 = (0..a.num_tokens()).map(|r| a.gates.at(r, i)).sum();
                brute += cfg.alpha * n as f64 * (hits / (2.0 * t)) * (gsum / t);
            }
        }
        assert!((brute - stats.total).abs() < 1e-12);
        for (f, p) in stats.f.iter().zip(&stats.p) {
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
