//! Config-driven training runs: periodic checkpoints, JSON-lines metrics,
//! resume, and a final evaluation and routing report.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::analytics::{collect_routing_log, RoutingReport};
use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::corpus::{Corpus, TokenStreams};
use crate::dense::{init_dense, DenseConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_perplexity, PerplexityTable};
use crate::losses::LossReport;
use crate::training::{training_step, TrainConfig};

/// Trains `ckpt` from its current step up to `cfg.steps`. The batch for
/// step `s` depends only on `(cfg.seed, s)`.
pub fn train_loop(
    ckpt: &mut Checkpoint,
    data: &TokenStreams,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossReport, &Checkpoint) -> Result<()>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    while ckpt.step < cfg.steps {
        let mut rng = cfg.step_rng(ckpt.step);
        let batch = data.sample_windows(cfg.batch_size, cfg.seq_len + 1, &mut rng)?;
        let r = training_step(ckpt, &batch, cfg)?;
        on_step(&r, ckpt)?;
        reports.push(r);
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Fresh { config: DenseConfig, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub model: ModelSource,
    pub train: TrainConfig,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub eval_batch_size: usize,
    /// Continue from `out/latest.ckpt` when present.
    pub resume: bool,
}

impl RunConfig {
    pub const METRICS_FILE: &'static str = "metrics.jsonl";
    pub const LATEST: &'static str = "latest.ckpt";
    pub const FINAL: &'static str = "final.ckpt";

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let train = TrainConfig {
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seq_len: kv.get_or("seq_len", d.seq_len)?,
            lr: kv.get_or("lr", d.lr)?,
            min_lr: kv.get_or("min_lr", d.min_lr)?,
            alpha: kv.get_or("alpha", d.alpha)?,
            steps: kv.get_or("steps", d.steps)?,
            seed: kv.get_or("seed", d.seed)?,
            include_shared: kv.get_or("include_shared", d.include_shared)?,
        };
        let model = match kv.get::<PathBuf>("init")? {
            Some(p) => ModelSource::Checkpoint(p),
            None => {
                let m = DenseConfig::default();
                ModelSource::Fresh {
                    config: DenseConfig {
                        vocab_size: kv.get_or("vocab_size", m.vocab_size)?,
                        hidden_size: kv.get_or("hidden_size", m.hidden_size)?,
                        num_layers: kv.get_or("num_layers", m.num_layers)?,
                        ffn_hidden: kv.get_or("ffn_hidden", m.ffn_hidden)?,
                        num_heads: kv.get_or("num_heads", m.num_heads)?,
                        max_seq_len: kv.get_or("max_seq_len", m.max_seq_len)?,
                    },
                    seed: kv.get_or("init_seed", 0)?,
                }
            }
        };
        let cfg = RunConfig {
            corpus: kv.require("corpus")?,
            out: kv.require("out")?,
            model,
            checkpoint_every: kv.get_or("checkpoint_every", 0)?,
            eval_batch_size: kv.get_or("eval_batch_size", train.batch_size)?,
            resume: kv.get_or("resume", false)?,
            train,
        };
        kv.finish()?;
        cfg.train.validate()?;
        if let ModelSource::Fresh { config, .. } = &cfg.model {
            config.validate()?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps_run: usize,
    pub final_step: u64,
    pub last: Option<LossReport>,
    pub perplexity: PerplexityTable,
    pub routing: Option<RoutingReport>,
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Keeps only metric lines for steps before `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: LossReport = serde_json::from_str(line)?;
        if r.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_file(path, kept)
}

pub fn load_or_init(model: &ModelSource) -> Result<Checkpoint> {
    match model {
        ModelSource::Checkpoint(p) => Checkpoint::load(p),
        ModelSource::Fresh { config, seed } => init_dense(config, *seed),
    }
}

/// Writes routing CSV and JSON files under `dir`.
pub fn write_routing_report(report: &RoutingReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("token_freq.csv"), report.token_csv())?;
    write_file(&dir.join("segment_freq.csv"), report.segment_csv())?;
    write_file(&dir.join("top2.json"), serde_json::to_string_pretty(&report.top2_json())?)
}

pub fn train_run(cfg: &RunConfig) -> Result<RunSummary> {
    let corpus = Corpus::read(&cfg.corpus)?;
    let latest = cfg.out.join(RunConfig::LATEST);
    let mut ckpt = if cfg.resume && latest.exists() {
        Checkpoint::load(&latest)?
    } else {
        load_or_init(&cfg.model)?
    };

    // everything checkable is checked before the first step
    let data = TokenStreams::new(&corpus.train);
    let vocab = ckpt.dense.vocab_size;
    for split in [&corpus.train, &corpus.heldout] {
        if let Some(id) = split.iter().flat_map(|s| s.ids.iter().copied()).max() {
            if id >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
        }
    }
    if cfg.train.seq_len > ckpt.dense.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.train.seq_len,
            max: ckpt.dense.max_seq_len,
        });
    }
    if !data.streams.iter().any(|(_, s)| s.len() > cfg.train.seq_len) {
        return Err(Error::Corpus("training split is shorter than one window".into()));
    }
    if corpus.heldout.is_empty() {
        return Err(Error::Corpus("held-out split is empty".into()));
    }

    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let metrics_path = cfg.out.join(RunConfig::METRICS_FILE);
    if cfg.resume {
        truncate_metrics(&metrics_path, ckpt.step)?;
    } else {
        write_file(&metrics_path, "")?;
    }
    let mut metrics = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let every = cfg.checkpoint_every;
    let reports = train_loop(&mut ckpt, &data, &cfg.train, |r, c| {
        let line = serde_json::to_string(r)?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if every > 0 && c.step % every == 0 {
            c.save(cfg.out.join(format!("step-{:06}.ckpt", c.step)))?;
            c.save(&latest)?;
        }
        Ok(())
    })?;
    ckpt.save(cfg.out.join(RunConfig::FINAL))?;
    ckpt.save(&latest)?;

    let perplexity = evaluate_perplexity(&ckpt, &corpus.heldout, cfg.train.seq_len, cfg.eval_batch_size)?;
    write_file(&cfg.out.join("perplexity.csv"), perplexity.to_csv())?;
    let routing = if ckpt.is_hybrid() {
        let log = collect_routing_log(&ckpt, &corpus.heldout, cfg.train.seq_len, cfg.eval_batch_size)?;
        let report = RoutingReport::from_log(&log);
        write_routing_report(&report, &cfg.out)?;
        Some(report)
    } else {
        None
    };
    Ok(RunSummary {
        steps_run: reports.len(),
        final_step: ckpt.step,
        last: reports.last().cloned(),
        perplexity,
        routing,
    })
}
