//! Dense → hybrid conversion.
//!
//! Every base tensor is kept and frozen. The dense FFN of each layer becomes
//! the frozen shared expert; routed token experts and segment experts start
//! as trainable copies of it. Routers start at zero (uniform affinities),
//! `W_tok = I` and `W_seg = 0`, so the fresh hybrid reproduces the dense
//! logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, MoeConfig};
use crate::dense::names;
use crate::error::{Error, Result};
use crate::model::logits;
use crate::numerics::{Parameter, Tensor};
use crate::segment_moe::SegmentMoEConfig;
use crate::token_moe::{GatingMode, TokenMoEConfig};

pub fn upcycle(
    dense: &Checkpoint,
    tok_cfg: &TokenMoEConfig,
    seg_cfg: &SegmentMoEConfig,
    gating: GatingMode,
) -> Result<Checkpoint> {
    if dense.is_hybrid() {
        return Err(Error::Config("checkpoint is already hybrid".into()));
    }
    tok_cfg.validate()?;
    seg_cfg.validate()?;
    let h = dense.dense.hidden_size;
    if tok_cfg.hidden_size != h || seg_cfg.hidden_size != h {
        return Err(Error::dim(
            "upcycle",
            &[h],
            &[tok_cfg.hidden_size, seg_cfg.hidden_size],
        ));
    }

    let mut params = dense.params.clone();
    for p in params.iter_mut() {
        p.trainable = false;
    }
    for l in 0..dense.dense.num_layers {
        for w in ["w1", "w2"] {
            let src = params
                .remove(&format!("{}.{w}", names::ffn(l)))
                .ok_or_else(|| Error::MissingParameter(format!("{}.{w}", names::ffn(l))))?;
            for i in 1..tok_cfg.num_experts {
                params.insert(Parameter::new(
                    format!("{}.{w}", names::expert(l, i)),
                    src.value.clone(),
                    true,
                ));
            }
            for i in 0..seg_cfg.num_experts {
                params.insert(Parameter::new(
                    format!("{}.{w}", names::seg_expert(l, i)),
                    src.value.clone(),
                    true,
                ));
            }
            params.insert(Parameter::new(
                format!("{}.{w}", names::shared(l)),
                src.value,
                false,
            ));
        }
        params.insert(Parameter::new(
            names::token_router(l),
            Tensor::zeros(&[h, tok_cfg.num_experts]),
            true,
        ));
        params.insert(Parameter::new(
            names::seg_router(l),
            Tensor::zeros(&[h, seg_cfg.num_experts]),
            true,
        ));
        params.insert(Parameter::new(names::fusion_tok(l), Tensor::eye(h), true));
        params.insert(Parameter::new(
            names::fusion_seg(l),
            Tensor::zeros(&[h, h]),
            true,
        ));
    }
    Ok(Checkpoint {
        dense: dense.dense.clone(),
        moe: Some(MoeConfig {
            token: tok_cfg.clone(),
            segment: seg_cfg.clone(),
            gating,
        }),
        step: 0,
        params,
    })
}

/// Names of parameters a hybrid checkpoint trains.
pub fn is_trainable_name(name: &str) -> bool {
    let mut parts = name.split('.');
    let (Some("layer"), Some(_), Some(kind)) = (parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    matches!(
        kind,
        "expert" | "seg_expert" | "token_router" | "seg_router" | "fusion"
    )
}

/// Largest absolute logit difference between `dense` and `hybrid` over
/// `probes` random single-sequence inputs. Probe lengths cycle through
/// `max_seq_len`, `max_seq_len − 1`, `max_seq_len − 2` so partial trailing
/// windows are exercised.
pub fn fidelity_check(
    dense: &Checkpoint,
    hybrid: &Checkpoint,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if dense.dense != hybrid.dense {
        return Err(Error::Config("dense and hybrid configs differ".into()));
    }
    let cfg = &dense.dense;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..probes {
        let len = cfg.max_seq_len.saturating_sub(i % 3).max(1);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let batch = [seq];
        let a = logits(dense, &batch)?;
        let b = logits(hybrid, &batch)?;
        worst = worst.max(a.max_abs_diff(&b)?);
    }
    Ok(worst)
}
