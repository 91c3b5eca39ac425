//! The toy decoder-only base model: learned token and position embeddings,
//! pre-norm blocks of causal attention and a two-layer GELU feed-forward
//! network, and an untied output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{gelu, matmul, Graph, ParamStore, Parameter, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            vocab_size: 512,
            hidden_size: 64,
            num_layers: 4,
            ffn_hidden: 256,
            num_heads: 2,
            max_seq_len: 256,
        }
    }
}

impl DenseConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        Ok(())
    }

    /// Entries in one FFN (`w1` plus `w2`).
    pub fn ffn_numel(&self) -> usize {
        2 * self.hidden_size * self.ffn_hidden
    }

    /// Entries in a freshly initialised dense checkpoint.
    pub fn dense_numel(&self) -> usize {
        let h = self.hidden_size;
        let per_layer = 4 * h * h + self.ffn_numel() + 2 * h;
        (self.vocab_size + self.max_seq_len) * h
            + self.num_layers * per_layer
            + h
            + h * self.vocab_size
    }
}

/// Parameter names shared by the dense and hybrid layouts.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const POS_EMBED: &str = "pos_embed";
    pub const FINAL_NORM: &str = "final_norm";
    pub const HEAD: &str = "head";

    pub fn attn_norm(l: usize) -> String {
        format!("layer.{l}.attn_norm")
    }
    pub fn attn(l: usize, w: &str) -> String {
        format!("layer.{l}.attn.{w}")
    }
    pub fn ffn_norm(l: usize) -> String {
        format!("layer.{l}.ffn_norm")
    }
    /// Prefix of the dense FFN; `{prefix}.w1` / `{prefix}.w2`.
    pub fn ffn(l: usize) -> String {
        format!("layer.{l}.ffn")
    }
    pub fn shared(l: usize) -> String {
        format!("layer.{l}.shared")
    }
    pub fn expert(l: usize, i: usize) -> String {
        format!("layer.{l}.expert.{i}")
    }
    pub fn seg_expert(l: usize, i: usize) -> String {
        format!("layer.{l}.seg_expert.{i}")
    }
    pub fn token_router(l: usize) -> String {
        format!("layer.{l}.token_router")
    }
    pub fn seg_router(l: usize) -> String {
        format!("layer.{l}.seg_router")
    }
    pub fn fusion_tok(l: usize) -> String {
        format!("layer.{l}.fusion.tok")
    }
    pub fn fusion_seg(l: usize) -> String {
        format!("layer.{l}.fusion.seg")
    }
}

/// Random dense checkpoint; every parameter trainable.
pub fn init_dense(cfg: &DenseConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.hidden_size;
    let f = cfg.ffn_hidden;
    let depth_scale = 1.0 / (2.0 * cfg.num_layers as f64).sqrt();
    let mut params = ParamStore::new();
    let mut add = |name: String, t: Tensor| params.insert(Parameter::new(name, t, true));

    add(names::EMBED.into(), Tensor::randn(&[cfg.vocab_size, h], 1.0, &mut rng));
    add(
        names::POS_EMBED.into(),
        Tensor::randn(&[cfg.max_seq_len, h], 0.1, &mut rng),
    );
    let inv_h = 1.0 / (h as f64).sqrt();
    for l in 0..cfg.num_layers {
        add(names::attn_norm(l), Tensor::full(&[h], 1.0));
        for w in ["wq", "wk", "wv"] {
            add(names::attn(l, w), Tensor::randn(&[h, h], inv_h, &mut rng));
        }
        add(
            names::attn(l, "wo"),
            Tensor::randn(&[h, h], inv_h * depth_scale, &mut rng),
        );
        add(names::ffn_norm(l), Tensor::full(&[h], 1.0));
        add(
            format!("{}.w1", names::ffn(l)),
            Tensor::randn(&[h, f], inv_h, &mut rng),
        );
        add(
            format!("{}.w2", names::ffn(l)),
            Tensor::randn(&[f, h], depth_scale / (f as f64).sqrt(), &mut rng),
        );
    }
    add(names::FINAL_NORM.into(), Tensor::full(&[h], 1.0));
    add(
        names::HEAD.into(),
        Tensor::randn(&[h, cfg.vocab_size], inv_h, &mut rng),
    );
    Ok(Checkpoint::dense(cfg.clone(), params))
}

/// Graph handles of one FFN's weight pair.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub w2: Var,
}

impl FfnVars {
    /// Binds `{prefix}.w1` and `{prefix}.w2`.
    pub fn bind(g: &mut Graph, params: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(FfnVars {
            w1: g.param(params.get(&format!("{prefix}.w1"))?),
            w2: g.param(params.get(&format!("{prefix}.w2"))?),
        })
    }
}

/// `gelu(x · w1) · w2` on the tape.
pub fn ffn(g: &mut Graph, x: Var, w: FfnVars) -> Result<Var> {
    let hidden = g.matmul(x, w.w1)?;
    let act = g.gelu(hidden);
    g.matmul(act, w.w2)
}

/// `gelu(x · w1) · w2` on plain tensors.
pub fn ffn_forward(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let mut hidden = matmul(x, w1)?;
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    matmul(&hidden, w2)
}

/// Logits `[T × vocab]` for a single token sequence.
pub fn dense_forward(ckpt: &Checkpoint, tokens: &[usize]) -> Result<Tensor> {
    crate::model::logits(ckpt, &[tokens.to_vec()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> DenseConfig {
        DenseConfig {
            vocab_size: 23,
            hidden_size: 8,
            num_layers: 2,
            ffn_hidden: 12,
            num_heads: 2,
            max_seq_len: 16,
        }
    }

    #[test]
    fn config_validation() {
        assert!(DenseConfig::default().validate().is_ok());
        let mut c = small();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = small();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let x = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = ffn_forward(&x, &Tensor::zeros(&[4, 6]), &Tensor::zeros(&[6, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_identity_weights_apply_activation_once() {
        let x = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let out = ffn_forward(&x, &Tensor::eye(4), &Tensor::eye(4)).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, gelu(*v));
        }
    }

    #[test]
    fn ffn_matches_hand_rolled_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let w1 = Tensor::randn(&[4, 7], 1.0, &mut rng);
        let w2 = Tensor::randn(&[7, 4], 1.0, &mut rng);
        let out = ffn_forward(&x, &w1, &w2).unwrap();
        for t in 0..5 {
            for o in 0..4 {
                let mut acc = 0.0;
                for j in 0..7 {
                    let pre: f64 = (0..4).map(|i| x.at(t, i) * w1.at(i, j)).sum();
                    let u = 0.797_884_560_802_865_4 * (pre + 0.044_715 * pre.powi(3));
                    acc += 0.5 * pre * (1.0 + u.tanh()) * w2.at(j, o);
                }
                assert!((acc - out.at(t, o)).abs() < 1e-12);
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let w = FfnVars {
            w1: g.constant(w1),
            w2: g.constant(w2),
        };
        let y = ffn(&mut g, xv, w).unwrap();
        assert_eq!(g.value(y), &out);
    }

    #[test]
    fn ffn_shape_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(ffn_forward(&x, &Tensor::zeros(&[4, 5]), &Tensor::zeros(&[5, 3])).is_err());
    }

    #[test]
    fn numel_formula_matches_enumeration() {
        let cfg = small();
        let ckpt = init_dense(&cfg, 0).unwrap();
        assert_eq!(ckpt.params.numel(), cfg.dense_numel());
    }

    #[test]
    fn single_token_shape_and_causality() {
        let cfg = small();
        let ckpt = init_dense(&cfg, 7).unwrap();
        let logits = dense_forward(&ckpt, &[3]).unwrap();
        assert_eq!(logits.shape(), [1, cfg.vocab_size]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq: Vec<usize> = (0..10).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let full = dense_forward(&ckpt, &seq).unwrap();
        for len in 1..seq.len() {
            let prefix = dense_forward(&ckpt, &seq[..len]).unwrap();
            for t in 0..len {
                assert_eq!(prefix.row(t), full.row(t), "prefix {len} position {t}");
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = small();
        let a = dense_forward(&init_dense(&cfg, 5).unwrap(), &[1, 2, 3, 4]).unwrap();
        let b = dense_forward(&init_dense(&cfg, 5).unwrap(), &[1, 2, 3, 4]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_out_of_vocab_and_long_input() {
        let cfg = small();
        let ckpt = init_dense(&cfg, 0).unwrap();
        assert!(matches!(
            dense_forward(&ckpt, &[cfg.vocab_size]),
            Err(Error::OutOfVocab { .. })
        ));
        let long = vec![0; cfg.max_seq_len + 1];
        assert!(matches!(
            dense_forward(&ckpt, &long),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn logits_rows_are_distributions() {
        let cfg = small();
        let ckpt = init_dense(&cfg, 9).unwrap();
        let logits = dense_forward(&ckpt, &[0, 5, 9, 2, 22]).unwrap();
        let p = crate::numerics::softmax_axis(&logits, 1).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
