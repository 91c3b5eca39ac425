//! Combined objective and the freeze-respecting SGD step.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{balance_loss_var, load_balance_loss, BalanceConfig, BalanceStats, LossReport};
use crate::model::{forward, ForwardPass};
use crate::numerics::{Gradients, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    pub alpha: f64,
    pub steps: u64,
    pub seed: u64,
    pub include_shared: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            seq_len: 32,
            lr: 0.05,
            min_lr: 0.005,
            alpha: 0.01,
            steps: 200,
            seed: 0,
            include_shared: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("need 0 <= min_lr <= lr");
        }
        Ok(())
    }

    /// Cosine decay from `lr` at step 0 to `min_lr` at `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let t = (step.min(self.steps) as f64) / self.steps as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * t).cos())
    }

    pub fn balance(&self, top_k: usize) -> BalanceConfig {
        BalanceConfig {
            alpha: self.alpha,
            top_k,
            include_shared: self.include_shared,
        }
    }

    /// RNG for the batch drawn at `step`; independent of earlier steps so a
    /// resumed run sees the same data.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }
}

/// A forward pass with the objective attached.
pub struct Objective {
    pub pass: ForwardPass,
    pub loss: Var,
    pub l_ntp: f64,
    pub l_balance: f64,
    pub balance: BalanceStats,
}

impl Objective {
    pub fn total(&self) -> f64 {
        self.pass.graph.value(self.loss).item()
    }

    pub fn gradients(&self) -> Result<Gradients> {
        self.pass.graph.backward(self.loss)
    }
}

/// `L_NTP + L_balance` on windows of `seq_len + 1` ids: position `t`
/// predicts id `t + 1`. Dense checkpoints get no balance term.
pub fn objective(ckpt: &Checkpoint, windows: &[Vec<usize>], balance: &BalanceConfig) -> Result<Objective> {
    if windows.iter().any(|w| w.len() < 2) {
        return Err(Error::Config("training windows need at least 2 ids".into()));
    }
    let inputs: Vec<Vec<usize>> = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
    let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    let mut pass = forward(ckpt, &inputs)?;
    let ntp = pass.graph.cross_entropy(pass.logits, &targets)?;
    let l_ntp = pass.graph.value(ntp).item();

    let history: Vec<_> = pass.routing.iter().map(|r| r.gates.clone()).collect();
    let stats = load_balance_loss(&history, balance);
    let gate_vars = pass.gate_vars.clone();
    let loss = match balance_loss_var(&mut pass.graph, &gate_vars, &history, balance)? {
        Some(b) => pass.graph.add(ntp, b)?,
        None => ntp,
    };
    Ok(Objective {
        pass,
        loss,
        l_ntp,
        l_balance: stats.total,
        balance: stats,
    })
}

/// One SGD step on the trainable parameters at the scheduled learning rate.
/// Frozen parameters are never written.
pub fn training_step(ckpt: &mut Checkpoint, windows: &[Vec<usize>], cfg: &TrainConfig) -> Result<LossReport> {
    let top_k = ckpt.moe.as_ref().map_or(1, |m| m.token.top_k);
    let obj = objective(ckpt, windows, &cfg.balance(top_k))?;
    let total = obj.l_ntp + obj.l_balance;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: ckpt.step,
            l_ntp: obj.l_ntp,
            l_balance: obj.l_balance,
        });
    }
    let lr = cfg.lr_at(ckpt.step);
    let grads = obj.gradients()?;
    for p in ckpt.params.iter_mut().filter(|p| p.trainable) {
        if let Some(g) = grads.param(&p.name) {
            p.value.axpy(-lr, g)?;
        }
    }
    let report = LossReport {
        step: ckpt.step,
        l_ntp: obj.l_ntp,
        l_balance: obj.l_balance,
        total,
        lr,
        per_layer_f: obj.balance.f,
        per_layer_p: obj.balance.p,
    };
    ckpt.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{init_dense, DenseConfig};
    use crate::numerics::{finite_diff_grad, relative_error, Tensor};
    use crate::segment_moe::SegmentMoEConfig;
    use crate::token_moe::{GatingMode, TokenMoEConfig};
    use crate::upcycle::upcycle;
    use rand::Rng;

    fn hybrid() -> Checkpoint {
        let cfg = DenseConfig {
            vocab_size: 17,
            hidden_size: 8,
            num_layers: 2,
            ffn_hidden: 12,
            num_heads: 2,
            max_seq_len: 12,
        };
        let dense = init_dense(&cfg, 5).unwrap();
        let tok = TokenMoEConfig {
            num_experts: 4,
            top_k: 2,
            hidden_size: 8,
        };
        let seg = SegmentMoEConfig {
            num_experts: 3,
            window: 3,
            capacity_factor: 1.0,
            hidden_size: 8,
        };
        let mut h = upcycle(&dense, &tok, &seg, GatingMode::SharedNormalized).unwrap();
        // break router symmetry so routing is non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in h.params.iter_mut().filter(|p| p.name.contains("router")) {
            p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
        }
        h
    }

    fn windows(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect())
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            seq_len: 10,
            lr: 0.1,
            min_lr: 0.01,
            steps: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = cfg();
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(25) - 0.055).abs() < 1e-15);
        assert!((c.lr_at(50) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(500) - 0.01).abs() < 1e-15);
        for s in 0..50 {
            assert!(c.lr_at(s + 1) <= c.lr_at(s));
        }
    }

    #[test]
    fn step_updates_only_trainable_parameters() {
        let mut ckpt = hybrid();
        let before = ckpt.clone();
        let frozen = ckpt.params.frozen_fingerprint();
        let report = training_step(&mut ckpt, &windows(3, 11, 17, 1), &cfg()).unwrap();
        assert_eq!(ckpt.params.frozen_fingerprint(), frozen);
        assert_eq!(ckpt.step, 1);
        assert!((report.total - report.l_ntp - report.l_balance).abs() < 1e-12);
        let mut changed = 0;
        for (a, b) in before.params.iter().zip(ckpt.params.iter()) {
            let d = a.value.max_abs_diff(&b.value).unwrap();
            if a.trainable {
                changed += (d > 0.0) as usize;
            } else {
                assert_eq!(d, 0.0, "{}", a.name);
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn report_fractions_are_normalised() {
        let mut ckpt = hybrid();
        let r = training_step(&mut ckpt, &windows(3, 11, 17, 2), &cfg()).unwrap();
        assert_eq!(r.per_layer_f.len(), 2);
        for (f, p) in r.per_layer_f.iter().zip(&r.per_layer_p) {
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let line = serde_json::to_value(&r).unwrap();
        for key in ["step", "l_ntp", "l_balance", "per_layer_f", "per_layer_p"] {
            assert!(line.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let mut ckpt = hybrid();
        let batch = windows(3, 11, 17, 3);
        let c = TrainConfig {
            lr: 0.3,
            min_lr: 0.3,
            ..cfg()
        };
        let first = training_step(&mut ckpt, &batch, &c).unwrap().total;
        let mut last = first;
        for _ in 0..49 {
            last = training_step(&mut ckpt, &batch, &c).unwrap().total;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn dense_step_trains_everything_without_balance() {
        let mut ckpt = init_dense(
            &DenseConfig {
                vocab_size: 9,
                hidden_size: 4,
                num_layers: 1,
                ffn_hidden: 6,
                num_heads: 1,
                max_seq_len: 8,
            },
            0,
        )
        .unwrap();
        let before = ckpt.clone();
        let r = training_step(&mut ckpt, &windows(2, 6, 9, 4), &cfg()).unwrap();
        assert_eq!(r.l_balance, 0.0);
        assert!(r.per_layer_f.is_empty());
        for (a, b) in before.params.iter().zip(ckpt.params.iter()) {
            assert!(a.value.max_abs_diff(&b.value).unwrap() > 0.0, "{}", a.name);
        }
    }

    #[test]
    fn non_finite_loss_aborts_without_update() {
        let mut ckpt = hybrid();
        ckpt.params.get_mut("head").unwrap().value.data_mut()[0] = f64::NAN;
        let before = ckpt.clone();
        let err = training_step(&mut ckpt, &windows(2, 11, 17, 5), &cfg()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }));
        assert_eq!(ckpt.step, 0);
        assert_eq!(
            ckpt.params.fingerprint(|_| true),
            before.params.fingerprint(|_| true)
        );
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let ckpt = hybrid();
        let batch = windows(2, 10, 17, 6);
        let bal = cfg().balance(2);
        let obj = objective(&ckpt, &batch, &bal).unwrap();
        let grads = obj.gradients().unwrap();
        let sig: Vec<_> = obj.pass.routing.iter().map(|r| r.signature()).collect();
        for name in ["layer.1.token_router", "layer.0.fusion.seg", "layer.0.expert.2.w1"] {
            let f = |p: &crate::numerics::ParamStore| {
                let c = Checkpoint {
                    params: p.clone(),
                    ..ckpt.clone()
                };
                let o = objective(&c, &batch, &bal).unwrap();
                let s: Vec<_> = o.pass.routing.iter().map(|r| r.signature()).collect();
                assert_eq!(s, sig, "routing changed under perturbation");
                o.total()
            };
            let numeric = finite_diff_grad(f, &ckpt.params, name, 1e-5).unwrap();
            let err = relative_error(grads.param(name).unwrap(), &numeric).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
        assert!(grads.param("layer.0.shared.w1").is_none());
    }
}
