//! Synthetic mini-language corpora.
//!
//! Every language draws from one shared sub-alphabet (delimiters, operators,
//! identifiers, numbers) and owns a disjoint block of keyword ids. Samples
//! come from a small stochastic grammar per language; the grammars differ in
//! block syntax, statement terminators and expression order.
//!
//! Id layout:
//!
//! ```text
//! 0            end of sample
//! 1..7         ( ) [ ] { }
//! 7..17        = + - * / < > ; , .
//! 17..33       identifiers
//! 33..43       numbers
//! 43..         keywords, KEYWORDS_PER_LANGUAGE per language
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS: usize = 0;
pub const DELIMITERS: [&str; 6] = ["(", ")", "[", "]", "{", "}"];
pub const OPERATORS: [&str; 10] = ["=", "+", "-", "*", "/", "<", ">", ";", ",", "."];
pub const NUM_IDENTIFIERS: usize = 16;
pub const NUM_NUMBERS: usize = 10;
pub const KEYWORDS: [&str; 12] = [
    "let", "set", "if", "else", "then", "while", "do", "end", "print", "return", "fn", "true",
];
pub const KEYWORDS_PER_LANGUAGE: usize = KEYWORDS.len();

const DELIM_BASE: usize = 1;
const OP_BASE: usize = DELIM_BASE + DELIMITERS.len();
const IDENT_BASE: usize = OP_BASE + OPERATORS.len();
const NUM_BASE: usize = IDENT_BASE + NUM_IDENTIFIERS;
pub const KEYWORD_BASE: usize = NUM_BASE + NUM_NUMBERS;

/// Highest id used by `n` languages, plus one.
pub fn alphabet_size(num_languages: usize) -> usize {
    KEYWORD_BASE + num_languages * KEYWORDS_PER_LANGUAGE
}

/// Delimiter pairs as `(open, close)` ids.
pub fn delimiter_pairs() -> [(usize, usize); 3] {
    [
        (DELIM_BASE, DELIM_BASE + 1),
        (DELIM_BASE + 2, DELIM_BASE + 3),
        (DELIM_BASE + 4, DELIM_BASE + 5),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceClass {
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Ident,
    Number,
    Operator,
}

#[derive(Clone, Debug, PartialEq)]
enum Sym {
    Id(usize),
    Class(Class),
    Rule(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct Production {
    weight: f64,
    symbols: Vec<Sym>,
}

/// A weighted context-free grammar over token ids. Past `max_depth` every
/// rule expands with its first production, which must terminate.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    names: Vec<String>,
    rules: Vec<Vec<Production>>,
    start: usize,
    max_depth: usize,
}

/// Builds a [`Grammar`] from productions written as whitespace-separated
/// symbols. A symbol is a rule name, one of the classes `IDENT`, `NUM`,
/// `OP`, a delimiter or operator literal, or `kw:<keyword>`.
pub struct GrammarBuilder {
    keyword_base: usize,
    rules: Vec<(String, Vec<(f64, String)>)>,
}

impl GrammarBuilder {
    pub fn new(keyword_base: usize) -> Self {
        GrammarBuilder {
            keyword_base,
            rules: Vec::new(),
        }
    }

    pub fn rule(mut self, name: &str, productions: &[(f64, &str)]) -> Self {
        let prods = productions.iter().map(|(w, s)| (*w, s.to_string())).collect();
        self.rules.push((name.to_string(), prods));
        self
    }

    fn terminal(&self, sym: &str) -> Option<Sym> {
        let pos = |list: &[&str]| list.iter().position(|&s| s == sym);
        Some(match sym {
            "IDENT" => Sym::Class(Class::Ident),
            "NUM" => Sym::Class(Class::Number),
            "OP" => Sym::Class(Class::Operator),
            _ => {
                if let Some(kw) = sym.strip_prefix("kw:") {
                    Sym::Id(self.keyword_base + KEYWORDS.iter().position(|&k| k == kw)?)
                } else if let Some(i) = pos(&DELIMITERS) {
                    Sym::Id(DELIM_BASE + i)
                } else {
                    Sym::Id(OP_BASE + pos(&OPERATORS)?)
                }
            }
        })
    }

    pub fn build(self, start: &str, max_depth: usize) -> Result<Grammar> {
        let index: HashMap<&str, usize> = self
            .rules
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.as_str(), i))
            .collect();
        let mut rules = Vec::with_capacity(self.rules.len());
        for (name, prods) in &self.rules {
            if prods.is_empty() {
                return Err(Error::Config(format!("rule `{name}` has no productions")));
            }
            let mut out = Vec::new();
            for (w, text) in prods {
                let symbols = text
                    .split_whitespace()
                    .map(|s| match index.get(s) {
                        Some(&r) => Ok(Sym::Rule(r)),
                        None => self
                            .terminal(s)
                            .ok_or_else(|| Error::Config(format!("unknown symbol `{s}` in rule `{name}`"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(Production { weight: *w, symbols });
            }
            rules.push(out);
        }
        let start = *index
            .get(start)
            .ok_or_else(|| Error::Config(format!("unknown start rule `{start}`")))?;
        let grammar = Grammar {
            names: self.rules.into_iter().map(|(n, _)| n).collect(),
            rules,
            start,
            max_depth,
        };
        grammar.check_first_productions_terminate()?;
        Ok(grammar)
    }
}

impl Grammar {
    fn check_first_productions_terminate(&self) -> Result<()> {
        // 0 = unvisited, 1 = on stack, 2 = done
        fn visit(g: &Grammar, r: usize, state: &mut [u8]) -> Result<()> {
            match state[r] {
                1 => {
                    return Err(Error::Config(format!(
                        "first production of `{}` does not terminate",
                        g.names[r]
                    )))
                }
                2 => return Ok(()),
                _ => {}
            }
            state[r] = 1;
            for s in &g.rules[r][0].symbols {
                if let Sym::Rule(c) = s {
                    visit(g, *c, state)?;
                }
            }
            state[r] = 2;
            Ok(())
        }
        let mut state = vec![0u8; self.rules.len()];
        (0..self.rules.len()).try_for_each(|r| visit(self, r, &mut state))
    }

    /// Expands the start rule into a token id sequence.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::new();
        self.expand(self.start, 0, rng, &mut out);
        out
    }

    fn expand(&self, rule: usize, depth: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
        let prods = &self.rules[rule];
        let prod = if depth >= self.max_depth {
            &prods[0]
        } else {
            prods.choose_weighted(rng, |p| p.weight).unwrap_or(&prods[0])
        };
        for s in &prod.symbols {
            match *s {
                Sym::Id(id) => out.push(id),
                Sym::Class(Class::Ident) => out.push(IDENT_BASE + rng.random_range(0..NUM_IDENTIFIERS)),
                Sym::Class(Class::Number) => out.push(NUM_BASE + rng.random_range(0..NUM_NUMBERS)),
                // arithmetic and comparison operators only
                Sym::Class(Class::Operator) => out.push(OP_BASE + rng.random_range(1..7)),
                Sym::Rule(r) => self.expand(r, depth + 1, rng, out),
            }
        }
    }
}

/// Surface syntax knobs distinguishing the preset languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    /// `let x = e ;`, `{ }` blocks, parenthesised conditions, infix.
    Braces,
    /// `x = e ;`, `{ }` blocks, parenthesised conditions, infix.
    Plain,
    /// `let x = e`, `do … end` blocks, `cond then`, prefix operators.
    Keyword,
    /// `set x e .`, `[ ]` blocks, parenthesised conditions, infix.
    Bracket,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniLanguage {
    pub name: String,
    pub resource: ResourceClass,
    /// First of this language's `KEYWORDS_PER_LANGUAGE` keyword ids.
    pub keyword_base: usize,
    pub style: Style,
    pub grammar: Grammar,
}

impl MiniLanguage {
    pub fn new(name: &str, resource: ResourceClass, slot: usize, style: Style) -> Result<Self> {
        let keyword_base = KEYWORD_BASE + slot * KEYWORDS_PER_LANGUAGE;
        Ok(MiniLanguage {
            name: name.to_string(),
            resource,
            keyword_base,
            style,
            grammar: build_grammar(keyword_base, style)?,
        })
    }

    /// Two high-resource and two low-resource languages.
    pub fn presets() -> Vec<MiniLanguage> {
        [
            ("alpha", ResourceClass::High, Style::Braces),
            ("beta", ResourceClass::High, Style::Plain),
            ("gamma", ResourceClass::Low, Style::Keyword),
            ("delta", ResourceClass::Low, Style::Bracket),
        ]
        .into_iter()
        .enumerate()
        .map(|(slot, (n, r, s))| MiniLanguage::new(n, r, slot, s).expect("preset grammars are valid"))
        .collect()
    }

    pub fn keyword_ids(&self) -> std::ops::Range<usize> {
        self.keyword_base..self.keyword_base + KEYWORDS_PER_LANGUAGE
    }

    pub fn max_id(&self) -> usize {
        self.keyword_ids().end - 1
    }
}

fn build_grammar(keyword_base: usize, style: Style) -> Result<Grammar> {
    let (assign, open, close, cond, expr_rec, term) = match style {
        Style::Braces => ("kw:let IDENT = expr ;", "{", "}", "( expr )", "term OP expr", ";"),
        Style::Plain => ("IDENT = expr ;", "{", "}", "( expr )", "term OP expr", ";"),
        Style::Keyword => ("kw:let IDENT = expr", "kw:do", "kw:end", "expr kw:then", "OP term expr", ""),
        Style::Bracket => ("kw:set IDENT expr .", "[", "]", "( expr )", "term OP expr", "."),
    };
    let block1 = format!("{open} stmt {close}");
    let block2 = format!("{open} stmt stmt {close}");
    let if1 = format!("kw:if {cond} block");
    let if2 = format!("kw:if {cond} block kw:else block");
    let wh = format!("kw:while {cond} block");
    let call = format!("kw:print ( args ) {term}");
    let ret = format!("kw:return expr {term}");
    GrammarBuilder::new(keyword_base)
        .rule("program", &[(1.0, "stmt"), (2.5, "stmt program")])
        .rule(
            "stmt",
            &[(3.0, assign), (1.0, &if1), (0.5, &if2), (1.0, &wh), (1.0, &call), (0.5, &ret)],
        )
        .rule("block", &[(2.0, &block1), (1.0, &block2)])
        .rule("args", &[(2.0, "expr"), (1.0, "expr , args")])
        .rule("expr", &[(3.0, "term"), (1.5, expr_rec), (0.5, "( expr )")])
        .rule(
            "term",
            &[
                (3.0, "IDENT"),
                (2.0, "NUM"),
                (1.0, "kw:fn ( expr )"),
                (0.5, "[ expr , expr ]"),
                (0.5, "kw:true"),
            ],
        )
        .build("program", 6)
}

/// Checks delimiter nesting with a stack.
pub fn delimiters_balanced(ids: &[usize]) -> bool {
    let pairs = delimiter_pairs();
    let mut stack = Vec::new();
    for &id in ids {
        if let Some(&(_, close)) = pairs.iter().find(|p| p.0 == id) {
            stack.push(close);
        } else if pairs.iter().any(|p| p.1 == id) && stack.pop() != Some(id) {
            return false;
        }
    }
    stack.is_empty()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub lang: String,
    pub ids: Vec<usize>,
}

/// Target corpus composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    /// Token ratio low-resource : high-resource, e.g. 9.0 for 9:1.
    pub low_high_ratio: f64,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        CorpusPlan {
            train_tokens: 200_000,
            heldout_tokens: 20_000,
            low_high_ratio: 9.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageStats {
    pub name: String,
    pub resource: ResourceClass,
    pub train_samples: usize,
    pub train_tokens: usize,
    pub heldout_samples: usize,
    pub heldout_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub plan: CorpusPlan,
    pub languages: Vec<LanguageStats>,
    /// Realised low:high train token ratio.
    pub low_high_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    pub manifest: CorpusManifest,
}

/// Per-language token quotas for `total` tokens.
fn quotas(langs: &[MiniLanguage], total: usize, ratio: f64) -> Vec<usize> {
    let n_low = langs.iter().filter(|l| l.resource == ResourceClass::Low).count();
    let n_high = langs.len() - n_low;
    let (low_share, high_share) = match (n_low, n_high) {
        (0, _) => (0.0, 1.0),
        (_, 0) => (1.0, 0.0),
        _ => (ratio / (1.0 + ratio), 1.0 / (1.0 + ratio)),
    };
    langs
        .iter()
        .map(|l| {
            let share = match l.resource {
                ResourceClass::Low => low_share / n_low as f64,
                ResourceClass::High => high_share / n_high.max(1) as f64,
            };
            (total as f64 * share).round() as usize
        })
        .collect()
}

/// Draws samples until `quota` tokens are reached, skipping any in `avoid`.
fn fill(lang: &MiniLanguage, quota: usize, rng: &mut ChaCha8Rng, avoid: &HashSet<Vec<usize>>) -> Vec<Sample> {
    let mut out = Vec::new();
    let mut tokens = 0;
    let mut misses = 0;
    while tokens < quota {
        let ids = lang.grammar.sample(rng);
        if avoid.contains(&ids) {
            misses += 1;
            // tiny grammars can saturate; stop rather than spin
            if misses > 100 * (out.len() + 1) {
                break;
            }
            continue;
        }
        tokens += ids.len();
        out.push(Sample {
            lang: lang.name.clone(),
            ids,
        });
    }
    out
}

/// Deterministic corpus for `langs` under `plan`. Held-out samples never
/// repeat a training sample.
pub fn generate_corpus(langs: &[MiniLanguage], plan: &CorpusPlan, vocab_size: usize, seed: u64) -> Result<Corpus> {
    if langs.is_empty() {
        return Err(Error::Corpus("no languages".into()));
    }
    if !(plan.low_high_ratio > 0.0 && plan.low_high_ratio.is_finite()) {
        return Err(Error::Corpus("low_high_ratio must be positive".into()));
    }
    let mut seen = HashSet::new();
    for l in langs {
        if l.max_id() >= vocab_size {
            return Err(Error::Corpus(format!(
                "language `{}` needs ids up to {} but vocab_size is {vocab_size}",
                l.name,
                l.max_id()
            )));
        }
        if !seen.insert(l.name.as_str()) {
            return Err(Error::Corpus(format!("duplicate language `{}`", l.name)));
        }
    }
    let root = ChaCha8Rng::seed_from_u64(seed);
    let stream = |i: usize, split: u64| {
        let mut r = root.clone();
        r.set_stream(2 * i as u64 + split);
        r
    };
    let train_q = quotas(langs, plan.train_tokens, plan.low_high_ratio);
    let held_q = quotas(langs, plan.heldout_tokens, plan.low_high_ratio);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut stats = Vec::new();
    for (i, l) in langs.iter().enumerate() {
        let tr = fill(l, train_q[i], &mut stream(i, 0), &HashSet::new());
        let avoid: HashSet<Vec<usize>> = tr.iter().map(|s| s.ids.clone()).collect();
        let he = fill(l, held_q[i], &mut stream(i, 1), &avoid);
        stats.push(LanguageStats {
            name: l.name.clone(),
            resource: l.resource,
            train_samples: tr.len(),
            train_tokens: tr.iter().map(|s| s.ids.len()).sum(),
            heldout_samples: he.len(),
            heldout_tokens: he.iter().map(|s| s.ids.len()).sum(),
        });
        train.extend(tr);
        heldout.extend(he);
    }
    let by_class = |c: ResourceClass| -> usize {
        stats.iter().filter(|s| s.resource == c).map(|s| s.train_tokens).sum()
    };
    let high = by_class(ResourceClass::High);
    let ratio = if high == 0 {
        f64::INFINITY
    } else {
        by_class(ResourceClass::Low) as f64 / high as f64
    };
    Ok(Corpus {
        train,
        heldout,
        manifest: CorpusManifest {
            seed,
            plan: plan.clone(),
            languages: stats,
            low_high_ratio: ratio,
        },
    })
}

pub fn format_samples(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.lang);
        out.push('\t');
        for (i, id) in s.ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{id}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn parse_samples(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (lang, ids) = line
                .split_once('\t')
                .ok_or_else(|| Error::Corpus(format!("line {}: missing tab", n + 1)))?;
            let ids = ids
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Corpus(format!("line {}: bad id `{t}`", n + 1)))
                })
                .collect::<Result<Vec<usize>>>()?;
            Ok(Sample {
                lang: lang.to_string(),
                ids,
            })
        })
        .collect()
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    parse_samples(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

impl Corpus {
    pub const TRAIN_FILE: &'static str = "train.txt";
    pub const HELDOUT_FILE: &'static str = "heldout.txt";
    pub const MANIFEST_FILE: &'static str = "manifest.json";

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put(Self::TRAIN_FILE, format_samples(&self.train))?;
        put(Self::HELDOUT_FILE, format_samples(&self.heldout))?;
        put(Self::MANIFEST_FILE, serde_json::to_string_pretty(&self.manifest)?)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(Self::MANIFEST_FILE);
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Corpus {
            train: read_samples(dir.join(Self::TRAIN_FILE))?,
            heldout: read_samples(dir.join(Self::HELDOUT_FILE))?,
            manifest: serde_json::from_str(&manifest)?,
        })
    }
}

/// Samples of one split joined per language into `id … id EOS id … EOS`
/// streams, in first-appearance order of the languages.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStreams {
    pub streams: Vec<(String, Vec<usize>)>,
}

impl TokenStreams {
    pub fn new(samples: &[Sample]) -> Self {
        let mut streams: Vec<(String, Vec<usize>)> = Vec::new();
        for s in samples {
            let k = match streams.iter().position(|(l, _)| *l == s.lang) {
                Some(k) => k,
                None => {
                    streams.push((s.lang.clone(), Vec::new()));
                    streams.len() - 1
                }
            };
            streams[k].1.extend_from_slice(&s.ids);
            streams[k].1.push(EOS);
        }
        TokenStreams { streams }
    }

    pub fn get(&self, lang: &str) -> Option<&[usize]> {
        self.streams.iter().find(|(l, _)| l == lang).map(|(_, s)| s.as_slice())
    }

    pub fn max_id(&self) -> Option<usize> {
        self.streams.iter().flat_map(|(_, s)| s.iter().copied()).max()
    }

    /// `batch` random windows of `len` ids; each window lies inside one
    /// language's stream and languages are hit in proportion to their
    /// token counts.
    pub fn sample_windows(&self, batch: usize, len: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
        let starts: Vec<usize> = self
            .streams
            .iter()
            .map(|(_, s)| (s.len() + 1).saturating_sub(len))
            .collect();
        let total: usize = starts.iter().sum();
        if total == 0 {
            return Err(Error::Corpus(format!("no stream holds a window of {len} ids")));
        }
        Ok((0..batch)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                let mut i = 0;
                while k >= starts[i] {
                    k -= starts[i];
                    i += 1;
                }
                self.streams[i].1[k..k + len].to_vec()
            })
            .collect())
    }
}
