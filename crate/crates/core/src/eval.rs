//! Held-out perplexity per language.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Sample, TokenStreams};
use crate::error::{Error, Result};
use crate::losses::ntp_loss;
use crate::model::logits;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguagePerplexity {
    pub lang: String,
    /// Predicted positions.
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityTable {
    pub rows: Vec<LanguagePerplexity>,
}

impl PerplexityTable {
    pub fn get(&self, lang: &str) -> Option<&LanguagePerplexity> {
        self.rows.iter().find(|r| r.lang == lang)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lang,tokens,mean_nll,perplexity\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.lang, r.tokens, r.mean_nll, r.perplexity));
        }
        out
    }
}

/// Splits `stream` into windows of `seq_len + 1` ids that overlap by one id,
/// so each id after the first is predicted exactly once. The tail window
/// may be shorter.
pub fn eval_windows(stream: &[usize], seq_len: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq_len + 1).min(stream.len());
        out.push(&stream[start..end]);
        start += seq_len;
    }
    out
}

/// `exp(mean NTP loss)` per language over `samples`. Windows are scored in
/// batches of `batch_size`; segment routing is joint within a batch, so
/// hybrid numbers depend on it.
pub fn evaluate_perplexity(
    ckpt: &Checkpoint,
    samples: &[Sample],
    seq_len: usize,
    batch_size: usize,
) -> Result<PerplexityTable> {
    if samples.is_empty() {
        return Err(Error::Corpus("evaluation split is empty".into()));
    }
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::Config("seq_len and batch_size must be positive".into()));
    }
    let streams = TokenStreams::new(samples);
    let mut rows = Vec::new();
    for (lang, stream) in &streams.streams {
        let windows = eval_windows(stream, seq_len);
        if windows.is_empty() {
            return Err(Error::Corpus(format!("language `{lang}` has fewer than 2 ids")));
        }
        let mut nll = 0.0;
        let mut count = 0usize;
        // full-length windows batch together; a short tail goes alone
        let (full, tail): (Vec<&[usize]>, Vec<&[usize]>) =
            windows.into_iter().partition(|w| w.len() == seq_len + 1);
        for chunk in full.chunks(batch_size).chain(tail.chunks(1)) {
            let inputs: Vec<Vec<usize>> = chunk.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
            let targets: Vec<usize> = chunk.iter().flat_map(|w| w[1..].iter().copied()).collect();
            let l = ntp_loss(&logits(ckpt, &inputs)?, &targets)?;
            nll += l * targets.len() as f64;
            count += targets.len();
        }
        let mean = nll / count as f64;
        rows.push(LanguagePerplexity {
            lang: lang.clone(),
            tokens: count,
            mean_nll: mean,
            perplexity: mean.exp(),
        });
    }
    Ok(PerplexityTable { rows })
}
