//! Tokenization, vocabulary and dataset ingestion.
//!
//! Dataset rows are `label<TAB>turn_1<TAB>…<TAB>turn_k<TAB>candidate`. Every
//! sentence is padded or truncated on the right to a fixed length `m`, and the
//! context is left-padded with all-PAD utterances to exactly `n_max` turns,
//! keeping the most recent turns when there are more.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format {
                    line: i + 1,
                    detail: format!("duplicate vocabulary token {t:?}"),
                });
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Builds a vocabulary from raw texts. Tokens seen at least `min_count`
    /// times get ids in descending frequency order, ties broken
    /// lexicographically; everything else maps to UNK.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    /// Builds from the turns and candidates of a dataset file.
    pub fn build_from_dataset(path: &Path, min_count: usize) -> Result<Self> {
        let rows = read_rows(path)?;
        let texts = rows
            .iter()
            .flat_map(|r| r.turns.iter().chain(std::iter::once(&r.candidate)))
            .map(String::as_str);
        Self::build(texts, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Inverse of [`Vocab::encode`], dropping PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number minus one is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Format {
                line: 1,
                detail: format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        Self::from_tokens(tokens)
    }
}

/// Word vectors, `[|V| × dim]`, stored as a parameter with a zero PAD row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Uniform(−scale, scale) initialization.
    pub fn init(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..vocab_size * dim)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        let t = Tensor::new(vec![vocab_size, dim], data).expect("embedding shape");
        EmbeddingTable {
            param: store.add_embedding(name, t),
            dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Class index used by the domain discriminators.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Fixed sentence length and context depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceShape {
    pub m: usize,
    pub n_max: usize,
}

impl Default for SequenceShape {
    fn default() -> Self {
        SequenceShape { m: 50, n_max: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversationExample {
    /// Exactly `n_max` sequences of exactly `m` ids, oldest first.
    pub utterances: Vec<Vec<usize>>,
    pub candidate: Vec<usize>,
    pub label: f64,
    pub group_id: usize,
    pub domain: Option<Domain>,
}

/// One parsed dataset row, before id encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawExample {
    pub line: usize,
    pub label: String,
    pub turns: Vec<String>,
    pub candidate: String,
}

impl RawExample {
    pub fn new(label: &str, turns: &[&str], candidate: &str) -> Self {
        RawExample {
            line: 0,
            label: label.to_string(),
            turns: turns.iter().map(|s| s.to_string()).collect(),
            candidate: candidate.to_string(),
        }
    }
}

fn fit(mut ids: Vec<usize>, m: usize) -> Vec<usize> {
    ids.truncate(m);
    ids.resize(m, PAD);
    ids
}

/// Encodes one row: right pad/truncate each sentence to `m`, keep the last
/// `n_max` turns and left-fill missing turns with PAD utterances.
pub fn encode_example(
    raw: &RawExample,
    group_id: usize,
    domain: Option<Domain>,
    vocab: &Vocab,
    shape: SequenceShape,
) -> Result<ConversationExample> {
    let label = match raw.label.trim() {
        "0" => 0.0,
        "1" => 1.0,
        other => {
            return Err(Error::Format {
                line: raw.line,
                detail: format!("label must be 0 or 1, got {other:?}"),
            })
        }
    };
    if raw.turns.is_empty() {
        return Err(Error::Format {
            line: raw.line,
            detail: "at least one context turn is required".into(),
        });
    }
    let keep = raw.turns.len().min(shape.n_max);
    let mut utterances = vec![vec![PAD; shape.m]; shape.n_max - keep];
    for turn in &raw.turns[raw.turns.len() - keep..] {
        utterances.push(fit(vocab.encode(turn), shape.m));
    }
    Ok(ConversationExample {
        utterances,
        candidate: fit(vocab.encode(&raw.candidate), shape.m),
        label,
        group_id,
        domain,
    })
}

pub fn parse_row(line: &str, lineno: usize) -> Result<RawExample> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 3 {
        return Err(Error::Format {
            line: lineno,
            detail: format!("expected label, at least one turn and a candidate; got {} columns", cols.len()),
        });
    }
    Ok(RawExample {
        line: lineno,
        label: cols[0].to_string(),
        turns: cols[1..cols.len() - 1].iter().map(|s| s.to_string()).collect(),
        candidate: cols[cols.len() - 1].to_string(),
    })
}

/// Reads raw rows, skipping an optional leading `#` header line.
pub fn read_rows(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rows(&text)
}

pub fn parse_rows(text: &str) -> Result<Vec<RawExample>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with('#') {
            continue;
        }
        rows.push(parse_row(line, i + 1)?);
    }
    Ok(rows)
}

/// Encodes rows into examples, assigning consecutive blocks of `group_size`
/// rows the same group id.
pub fn encode_rows(
    rows: &[RawExample],
    vocab: &Vocab,
    shape: SequenceShape,
    group_size: usize,
    domain: Option<Domain>,
) -> Result<Vec<ConversationExample>> {
    if group_size == 0 {
        return Err(Error::Config("group_size must be at least 1".into()));
    }
    if !rows.len().is_multiple_of(group_size) {
        return Err(Error::Data(format!(
            "{} rows do not split into groups of {group_size}",
            rows.len()
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| encode_example(r, i / group_size, domain, vocab, shape))
        .collect()
}

pub fn load_dataset(
    path: &Path,
    vocab: &Vocab,
    shape: SequenceShape,
    group_size: usize,
    domain: Option<Domain>,
) -> Result<Vec<ConversationExample>> {
    encode_rows(&read_rows(path)?, vocab, shape, group_size, domain)
}
