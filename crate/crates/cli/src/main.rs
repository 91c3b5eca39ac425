use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybrid_moe::analytics::{collect_routing_log, RoutingReport};
use hybrid_moe::config::KvConfig;
use hybrid_moe::corpus::{alphabet_size, generate_corpus, Corpus, CorpusPlan, MiniLanguage};
use hybrid_moe::eval::evaluate_perplexity;
use hybrid_moe::run::{train_run, write_routing_report, RunConfig};
use hybrid_moe::upcycle::{fidelity_check, upcycle};
use hybrid_moe::{init_dense, Checkpoint, DenseConfig, Error, GatingMode, Result, SegmentMoEConfig, TokenMoEConfig};

#[derive(Parser)]
#[command(name = "hmoe", version, about = "Hybrid token/segment mixture-of-experts toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mini-language corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200_000)]
        train_tokens: usize,
        #[arg(long, default_value_t = 20_000)]
        heldout_tokens: usize,
        /// Low:high resource token ratio.
        #[arg(long, default_value_t = 9.0)]
        ratio: f64,
        /// Comma-separated preset names; all presets by default.
        #[arg(long, value_delimiter = ',')]
        languages: Vec<String>,
        /// Defaults to the smallest vocabulary covering the languages.
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Write a freshly initialised dense checkpoint.
    InitDense {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        #[arg(long, default_value_t = 64)]
        hidden_size: usize,
        #[arg(long, default_value_t = 4)]
        num_layers: usize,
        #[arg(long, default_value_t = 256)]
        ffn_hidden: usize,
        #[arg(long, default_value_t = 2)]
        num_heads: usize,
        #[arg(long, default_value_t = 256)]
        max_seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set steps=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Per-language perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: String,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Routing frequency report for a hybrid checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: String,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Convert a dense checkpoint into the hybrid layout.
    Upcycle {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        tok_experts: usize,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long, default_value_t = 6)]
        seg_experts: usize,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 1.0)]
        capacity_c: f64,
        #[arg(long, default_value = "shared-normalized")]
        gating: GatingMode,
    },
    /// Check that a hybrid reproduces its dense source.
    Verify {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        hybrid: PathBuf,
        #[arg(long, default_value_t = 32)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

fn split<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a [hybrid_moe::corpus::Sample]> {
    match name {
        "train" => Ok(&corpus.train),
        "heldout" => Ok(&corpus.heldout),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenCorpus {
            out,
            seed,
            train_tokens,
            heldout_tokens,
            ratio,
            languages,
            vocab_size,
        } => {
            let presets = MiniLanguage::presets();
            let langs: Vec<MiniLanguage> = if languages.is_empty() {
                presets
            } else {
                languages
                    .iter()
                    .map(|n| {
                        presets
                            .iter()
                            .find(|l| l.name == *n)
                            .cloned()
                            .ok_or_else(|| Error::Config(format!("unknown language `{n}`")))
                    })
                    .collect::<Result<_>>()?
            };
            let vocab = vocab_size.unwrap_or_else(|| langs.iter().map(|l| l.max_id() + 1).max().unwrap_or(alphabet_size(0)));
            let plan = CorpusPlan {
                train_tokens,
                heldout_tokens,
                low_high_ratio: ratio,
            };
            let corpus = generate_corpus(&langs, &plan, vocab, seed)?;
            corpus.write(&out)?;
            for l in &corpus.manifest.languages {
                println!(
                    "{}\t{:?}\ttrain {} tokens / {} samples\theldout {} tokens",
                    l.name, l.resource, l.train_tokens, l.train_samples, l.heldout_tokens
                );
            }
            println!("low:high = {:.3}, vocab >= {vocab}", corpus.manifest.low_high_ratio);
        }
        Command::InitDense {
            out,
            vocab_size,
            hidden_size,
            num_layers,
            ffn_hidden,
            num_heads,
            max_seq_len,
            seed,
        } => {
            let cfg = DenseConfig {
                vocab_size,
                hidden_size,
                num_layers,
                ffn_hidden,
                num_heads,
                max_seq_len,
            };
            let ckpt = init_dense(&cfg, seed)?;
            ckpt.save(&out)?;
            println!("{} parameters -> {}", ckpt.params.numel(), out.display());
        }
        Command::Train { config, overrides } => {
            let mut kv = KvConfig::load(&config)?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
                kv.set(k.trim(), v.trim());
            }
            let cfg = RunConfig::from_kv(&kv)?;
            let summary = train_run(&cfg)?;
            println!("ran {} steps, now at step {}", summary.steps_run, summary.final_step);
            if let Some(last) = &summary.last {
                println!("last l_ntp {:.4} l_balance {:.4}", last.l_ntp, last.l_balance);
            }
            print!("{}", summary.perplexity.to_csv());
        }
        Command::Eval {
            ckpt,
            corpus,
            split: name,
            seq_len,
            batch_size,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let corpus = Corpus::read(&corpus)?;
            let table = evaluate_perplexity(&ckpt, split(&corpus, &name)?, seq_len, batch_size)?;
            print!("{}", table.to_csv());
        }
        Command::Analyze {
            ckpt,
            corpus,
            out,
            split: name,
            seq_len,
            batch_size,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let corpus = Corpus::read(&corpus)?;
            let log = collect_routing_log(&ckpt, split(&corpus, &name)?, seq_len, batch_size)?;
            let report = RoutingReport::from_log(&log);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_routing_report(&report, &out)?;
            write(&out.join("routing_log.json"), serde_json::to_string(&log)?)?;
            println!("{}", serde_json::to_string_pretty(&report.top2_json())?);
        }
        Command::Upcycle {
            input,
            out,
            tok_experts,
            top_k,
            seg_experts,
            window,
            capacity_c,
            gating,
        } => {
            let dense = Checkpoint::load(&input)?;
            let h = dense.dense.hidden_size;
            let tok = TokenMoEConfig {
                num_experts: tok_experts,
                top_k,
                hidden_size: h,
            };
            let seg = SegmentMoEConfig {
                num_experts: seg_experts,
                window,
                capacity_factor: capacity_c,
                hidden_size: h,
            };
            let hybrid = upcycle(&dense, &tok, &seg, gating)?;
            hybrid.save(&out)?;
            let trainable: usize = hybrid.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum();
            println!(
                "{} parameters ({} trainable) -> {}",
                hybrid.params.numel(),
                trainable,
                out.display()
            );
        }
        Command::Verify {
            dense,
            hybrid,
            probes,
            seed,
            tol,
        } => {
            let d = Checkpoint::load(&dense)?;
            let h = Checkpoint::load(&hybrid)?;
            let diff = fidelity_check(&d, &h, probes, seed)?;
            let ok = diff <= tol;
            println!("max |dlogit| = {diff:.3e} over {probes} probes: {}", if ok { "ok" } else { "FAILED" });
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
