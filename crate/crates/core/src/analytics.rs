//! Routing specialisation statistics: which token experts each language
//! uses, and which segment positions segment experts pick.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Sample, TokenStreams};
use crate::error::{Error, Result};
use crate::model::forward;
use crate::numerics::top_k;

/// First, middle and last layer (0-based), deduplicated.
pub fn analysis_layers(num_layers: usize) -> Vec<usize> {
    let mut l = vec![0, (num_layers / 2).saturating_sub(1), num_layers.saturating_sub(1)];
    l.dedup();
    l
}

/// Raw routing decisions of one batch at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub layer: usize,
    pub lang: String,
    /// Token experts chosen by each token.
    pub selected: Vec<Vec<usize>>,
    /// `(segment expert, 1-based segment position)` for every pick.
    pub segment_picks: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingLog {
    pub num_token_experts: usize,
    pub num_segment_experts: usize,
    /// Segments per window.
    pub positions: usize,
    pub layers: Vec<usize>,
    pub languages: Vec<String>,
    pub entries: Vec<LogEntry>,
}

/// Runs `samples` through a hybrid checkpoint and records the routing of the
/// analysis layers. Windows are `seq_len` ids, batched per language.
pub fn collect_routing_log(
    ckpt: &Checkpoint,
    samples: &[Sample],
    seq_len: usize,
    batch_size: usize,
) -> Result<RoutingLog> {
    let moe = ckpt
        .moe
        .as_ref()
        .ok_or_else(|| Error::Config("routing analytics needs a hybrid checkpoint".into()))?;
    if samples.is_empty() {
        return Err(Error::Corpus("analysis split is empty".into()));
    }
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::Config("seq_len and batch_size must be positive".into()));
    }
    let layers = analysis_layers(ckpt.dense.num_layers);
    let streams = TokenStreams::new(samples);
    let mut entries = Vec::new();
    for (lang, stream) in &streams.streams {
        let windows: Vec<Vec<usize>> = stream.chunks_exact(seq_len).map(<[usize]>::to_vec).collect();
        for batch in windows.chunks(batch_size) {
            let pass = forward(ckpt, batch)?;
            for r in pass.routing.iter().filter(|r| layers.contains(&r.layer)) {
                let segment_picks = match &r.experts {
                    Some(a) => a
                        .indices
                        .iter()
                        .enumerate()
                        .flat_map(|(e, segs)| segs.iter().map(move |&v| (e, r.plan.position(v) + 1)))
                        .collect(),
                    None => Vec::new(),
                };
                entries.push(LogEntry {
                    layer: r.layer,
                    lang: lang.clone(),
                    selected: r.gates.selected.clone(),
                    segment_picks,
                });
            }
        }
    }
    Ok(RoutingLog {
        num_token_experts: moe.token.num_experts,
        num_segment_experts: moe.segment.num_experts,
        positions: seq_len / moe.segment.window,
        layers,
        languages: streams.streams.iter().map(|(l, _)| l.clone()).collect(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// `[languages × N_tok]`; row `l` is the share of language `l`'s expert
    /// selections that went to each token expert.
    pub token_frequency: Vec<Vec<f64>>,
    /// `[N_seg × P]`; row `e` is the distribution of segment positions
    /// picked by segment expert `e`.
    pub segment_frequency: Vec<Vec<f64>>,
    /// Most often picked 1-based segment positions per language.
    pub top2_segments: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub languages: Vec<String>,
    pub layers: Vec<LayerReport>,
}

fn normalize(counts: &[f64]) -> Vec<f64> {
    let s: f64 = counts.iter().sum();
    if s == 0.0 {
        vec![0.0; counts.len()]
    } else {
        counts.iter().map(|c| c / s).collect()
    }
}

/// Two largest entries of `counts` as 1-based positions, lower index first
/// on ties. A single position is repeated.
fn top2(counts: &[f64]) -> (usize, usize) {
    match counts.len() {
        0 => (0, 0),
        1 => (1, 1),
        _ => {
            let t = top_k(counts, 2).expect("at least two positions");
            (t[0] + 1, t[1] + 1)
        }
    }
}

impl RoutingReport {
    pub fn from_log(log: &RoutingLog) -> Self {
        let nl = log.languages.len();
        let layers = log
            .layers
            .iter()
            .map(|&layer| {
                let mut tok = vec![vec![0.0; log.num_token_experts]; nl];
                let mut seg = vec![vec![0.0; log.positions]; log.num_segment_experts];
                let mut lang_pos = vec![vec![0.0; log.positions]; nl];
                for e in log.entries.iter().filter(|e| e.layer == layer) {
                    let li = log.languages.iter().position(|l| *l == e.lang).expect("known language");
                    for &i in e.selected.iter().flatten() {
                        tok[li][i] += 1.0;
                    }
                    for &(x, p) in &e.segment_picks {
                        seg[x][p - 1] += 1.0;
                        lang_pos[li][p - 1] += 1.0;
                    }
                }
                LayerReport {
                    layer,
                    token_frequency: tok.iter().map(|r| normalize(r)).collect(),
                    segment_frequency: seg.iter().map(|r| normalize(r)).collect(),
                    top2_segments: lang_pos.iter().map(|r| top2(r)).collect(),
                }
            })
            .collect();
        RoutingReport {
            languages: log.languages.clone(),
            layers,
        }
    }

    /// `layer,lang,expert_0,…` rows.
    pub fn token_csv(&self) -> String {
        let n = self.layers.first().and_then(|l| l.token_frequency.first()).map_or(0, Vec::len);
        let mut out = String::from("layer,lang");
        for i in 0..n {
            out.push_str(&format!(",expert_{i}"));
        }
        out.push('\n');
        for l in &self.layers {
            for (lang, row) in self.languages.iter().zip(&l.token_frequency) {
                out.push_str(&format!("{},{lang}", l.layer));
                for v in row {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// `layer,expert,pos_1,…` rows.
    pub fn segment_csv(&self) -> String {
        let p = self.layers.first().and_then(|l| l.segment_frequency.first()).map_or(0, Vec::len);
        let mut out = String::from("layer,expert");
        for i in 1..=p {
            out.push_str(&format!(",pos_{i}"));
        }
        out.push('\n');
        for l in &self.layers {
            for (e, row) in l.segment_frequency.iter().enumerate() {
                out.push_str(&format!("{},{e}", l.layer));
                for v in row {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// `{"layers": [{"layer": l, "top2": {"<lang>": "(v1, v2)", …}}, …]}`
    pub fn top2_json(&self) -> serde_json::Value {
        let layers: Vec<_> = self
            .layers
            .iter()
            .map(|l| {
                let top2: serde_json::Map<_, _> = self
                    .languages
                    .iter()
                    .zip(&l.top2_segments)
                    .map(|(lang, (a, b))| (lang.clone(), serde_json::Value::String(format!("({a}, {b})"))))
                    .collect();
                serde_json::json!({ "layer": l.layer, "top2": top2 })
            })
            .collect();
        serde_json::json!({ "layers": layers })
    }
}

/// Checks that `s` looks like `(v1, v2)` with positive integers.
pub fn is_pair_format(s: &str) -> bool {
    let Some(inner) = s.strip_prefix('(').and_then(|s| s.strip_suffix(')')) else {
        return false;
    };
    let Some((a, b)) = inner.split_once(", ") else {
        return false;
    };
    [a, b]
        .iter()
        .all(|v| !v.is_empty() && v.bytes().all(|c| c.is_ascii_digit()) && v.parse::<usize>().is_ok_and(|n| n > 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusPlan, MiniLanguage};
    use crate::dense::{init_dense, DenseConfig};
    use crate::numerics::Tensor;
    use crate::segment_moe::SegmentMoEConfig;
    use crate::token_moe::{GatingMode, TokenMoEConfig};
    use crate::upcycle::upcycle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hybrid(random_routers: bool) -> Checkpoint {
        let cfg = DenseConfig {
            vocab_size: 91,
            hidden_size: 8,
            num_layers: 4,
            ffn_hidden: 8,
            num_heads: 2,
            max_seq_len: 16,
        };
        let tok = TokenMoEConfig {
            num_experts: 5,
            top_k: 2,
            hidden_size: 8,
        };
        let seg = SegmentMoEConfig {
            num_experts: 3,
            window: 4,
            capacity_factor: 1.0,
            hidden_size: 8,
        };
        let mut h = upcycle(&init_dense(&cfg, 2).unwrap(), &tok, &seg, GatingMode::SharedNormalized).unwrap();
        if random_routers {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for p in h.params.iter_mut().filter(|p| p.name.contains("router")) {
                p.value = Tensor::randn(p.value.shape(), 1.0, &mut rng);
            }
        }
        h
    }

    fn samples() -> Vec<Sample> {
        let plan = CorpusPlan {
            train_tokens: 10,
            heldout_tokens: 1500,
            low_high_ratio: 1.0,
        };
        generate_corpus(&MiniLanguage::presets(), &plan, 91, 0).unwrap().heldout
    }

    #[test]
    fn layer_sampling() {
        assert_eq!(analysis_layers(24), vec![0, 11, 23]);
        assert_eq!(analysis_layers(4), vec![0, 1, 3]);
        assert_eq!(analysis_layers(2), vec![0, 1]);
        assert_eq!(analysis_layers(1), vec![0]);
    }

    #[test]
    fn rows_sum_to_one_and_pairs_are_formatted() {
        let log = collect_routing_log(&hybrid(true), &samples(), 16, 4).unwrap();
        let rep = RoutingReport::from_log(&log);
        assert_eq!(rep.layers.len(), 3);
        for l in &rep.layers {
            assert_eq!(l.token_frequency.len(), 4);
            assert_eq!(l.segment_frequency.len(), 3);
            for row in l.token_frequency.iter().chain(&l.segment_frequency) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(l.segment_frequency.iter().all(|r| r.len() == 4));
        }
        let j = rep.top2_json();
        for l in j["layers"].as_array().unwrap() {
            for v in l["top2"].as_object().unwrap().values() {
                assert!(is_pair_format(v.as_str().unwrap()), "{v}");
            }
        }
        assert!(rep.token_csv().starts_with("layer,lang,expert_0,"));
        assert_eq!(rep.segment_csv().lines().count(), 1 + 3 * 3);
    }

    #[test]
    fn report_matches_independent_pass_over_log() {
        let log = collect_routing_log(&hybrid(true), &samples(), 16, 3).unwrap();
        let rep = RoutingReport::from_log(&log);
        for l in &rep.layers {
            for (li, lang) in log.languages.iter().enumerate() {
                let entries: Vec<_> = log.entries.iter().filter(|e| e.layer == l.layer && e.lang == *lang).collect();
                let tokens: usize = entries.iter().map(|e| e.selected.len()).sum();
                for i in 0..log.num_token_experts {
                    let hits = entries
                        .iter()
                        .flat_map(|e| &e.selected)
                        .filter(|s| s.contains(&i))
                        .count();
                    let want = hits as f64 / (2 * tokens) as f64;
                    assert!((l.token_frequency[li][i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fresh_upcycle_ties_go_to_the_first_routed_expert() {
        let log = collect_routing_log(&hybrid(false), &samples(), 16, 4).unwrap();
        let rep = RoutingReport::from_log(&log);
        for l in &rep.layers {
            for row in &l.token_frequency {
                assert_eq!(row, &vec![0.5, 0.5, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn pair_format_checker() {
        assert!(is_pair_format("(10, 3)"));
        assert!(!is_pair_format("(10,3)"));
        assert!(!is_pair_format("10, 3"));
        assert!(!is_pair_format("(0, 3)"));
        assert!(!is_pair_format("(a, 3)"));
        assert_eq!(top2(&[1.0, 5.0, 5.0, 0.0]), (2, 3));
    }

    #[test]
    fn dense_checkpoints_are_rejected() {
        let d = init_dense(&DenseConfig::default(), 0).unwrap();
        assert!(collect_routing_log(&d, &samples(), 16, 4).is_err());
    }
}
