//! TF-IDF candidate callback over a question bank, model reranking and the
//! line-delimited JSON serving loop.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::text::{encode_example, tokenize, Domain, RawExample, Vocab};

/// Turns concatenated into the callback query.
pub const CONTEXT_TURNS: usize = 3;
pub const DEFAULT_K: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub id: String,
    pub question: String,
    pub answer_id: String,
}

/// Sparse unit vector: `(term, weight)` pairs sorted by term.
type SparseVec = Vec<(usize, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct TfIdfIndex {
    entries: Vec<BankEntry>,
    terms: BTreeMap<String, usize>,
    df: Vec<usize>,
    idf: Vec<f64>,
    vectors: Vec<SparseVec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexStats {
    pub documents: usize,
    pub terms: usize,
}

pub fn parse_bank(text: &str) -> Result<Vec<BankEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with('#')) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format {
                line: i + 1,
                detail: format!("expected id, question, answer_id; got {} columns", cols.len()),
            });
        }
        out.push(BankEntry {
            id: cols[0].to_string(),
            question: cols[1].to_string(),
            answer_id: cols[2].to_string(),
        });
    }
    Ok(out)
}

fn normalize(mut v: SparseVec) -> SparseVec {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in &mut v {
            *w /= norm;
        }
    }
    v
}

fn dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

impl TfIdfIndex {
    /// `idf = ln((1 + N) / (1 + df)) + 1`, weight `tf · idf`, L2-normalized.
    pub fn build(entries: Vec<BankEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate question id {:?}", e.id)));
            }
        }
        let docs: Vec<Vec<String>> = entries.iter().map(|e| tokenize(&e.question)).collect();
        let mut terms = BTreeMap::new();
        for t in docs.iter().flatten() {
            terms.entry(t.clone()).or_insert(0usize);
        }
        for (i, v) in terms.values_mut().enumerate() {
            *v = i;
        }
        let mut df = vec![0usize; terms.len()];
        let mut counts: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(docs.len());
        for doc in &docs {
            let mut tf = BTreeMap::new();
            for t in doc {
                *tf.entry(terms[t]).or_insert(0.0) += 1.0;
            }
            for &t in tf.keys() {
                df[t] += 1;
            }
            counts.push(tf);
        }
        let n = entries.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let vectors = counts
            .into_iter()
            .map(|tf| normalize(tf.into_iter().map(|(t, c)| (t, c * idf[t])).collect()))
            .collect();
        Ok(TfIdfIndex {
            entries,
            terms,
            df,
            idf,
            vectors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::build(parse_bank(&text)?)
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            documents: self.entries.len(),
            terms: self.terms.len(),
        }
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.terms.get(term).map(|&t| self.idf[t])
    }

    pub fn df(&self, term: &str) -> Option<usize> {
        self.terms.get(term).map(|&t| self.df[t])
    }

    /// Unit-norm weight vector of one bank question.
    pub fn vector(&self, i: usize) -> &[(usize, f64)] {
        &self.vectors[i]
    }

    fn query_vector(&self, text: &str) -> SparseVec {
        let mut tf = BTreeMap::new();
        for t in tokenize(text) {
            if let Some(&id) = self.terms.get(&t) {
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
        }
        normalize(tf.into_iter().map(|(t, c)| (t, c * self.idf[t])).collect())
    }

    /// Top-`k` bank entries by cosine with the last ≤3 turns, ties by
    /// ascending id. Entries with zero similarity are not returned.
    pub fn callback(&self, turns: &[String], k: usize) -> Vec<(usize, f64)> {
        let start = turns.len().saturating_sub(CONTEXT_TURNS);
        let q = self.query_vector(&turns[start..].join(" "));
        if q.is_empty() {
            return Vec::new();
        }
        let mut hits: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, dot(&q, v)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.entries[a.0].id.cmp(&self.entries[b.0].id)));
        hits.truncate(k);
        hits
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct RerankRequest {
    pub turns: Vec<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RerankResponse {
    pub ranked: Vec<Ranked>,
    pub callback: Vec<String>,
}

/// A loaded model, its vocabulary and the question index.
pub struct Reranker {
    pub index: TfIdfIndex,
    pub model: Model,
    pub vocab: Vocab,
    pub exec: Exec,
}

impl Reranker {
    /// Scores the callback candidates as one mini-batch and sorts them by
    /// score, descending; equal scores keep callback order.
    pub fn rerank(&self, turns: &[String], k: usize) -> Result<RerankResponse> {
        if k == 0 {
            return Err(Error::Usage("k must be at least 1".into()));
        }
        if turns.is_empty() {
            return Err(Error::Usage("at least one context turn is required".into()));
        }
        let hits = self.index.callback(turns, k);
        let entries = self.index.entries();
        let shape = self.model.config.shape();
        let context: Vec<&str> = turns.iter().map(String::as_str).collect();
        let batch = hits
            .iter()
            .map(|&(i, _)| {
                let raw = RawExample::new("0", &context, &entries[i].question);
                encode_example(&raw, 0, Some(Domain::Target), &self.vocab, shape)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = self.model.score_batch(&batch, self.exec)?;
        let mut ranked: Vec<Ranked> = hits
            .iter()
            .zip(&scores)
            .map(|(&(i, _), &score)| Ranked {
                id: entries[i].id.clone(),
                score,
            })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(RerankResponse {
            ranked,
            callback: hits.iter().map(|&(i, _)| entries[i].id.clone()).collect(),
        })
    }

    /// Answers one request line; malformed requests produce an error object.
    pub fn handle_line(&self, line: &str, default_k: usize) -> String {
        let reply = serde_json::from_str::<RerankRequest>(line)
            .map_err(|e| e.to_string())
            .and_then(|req| {
                self.rerank(&req.turns, req.k.unwrap_or(default_k))
                    .map_err(|e| e.to_string())
            });
        match reply {
            Ok(resp) => serde_json::to_string(&resp).expect("response serializes"),
            Err(msg) => serde_json::json!({ "error": msg }).to_string(),
        }
    }

    /// One JSON response line per input line, in order, until end of input.
    pub fn serve(&self, input: impl BufRead, mut output: impl Write, default_k: usize) -> std::io::Result<usize> {
        let mut n = 0;
        for line in input.lines() {
            let reply = self.handle_line(&line?, default_k);
            writeln!(output, "{reply}")?;
            output.flush()?;
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[(&str, &str)]) -> TfIdfIndex {
        TfIdfIndex::build(
            rows.iter()
                .map(|(id, q)| BankEntry {
                    id: id.to_string(),
                    question: q.to_string(),
                    answer_id: "a".into(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn turns(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_question_vector_is_unit() {
        let idx = bank(&[("q1", "how do i reset my password")]);
        let norm: f64 = idx.vector(0).iter().map(|(_, w)| w * w).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(idx.stats(), IndexStats { documents: 1, terms: 6 });
    }

    #[test]
    fn ubiquitous_term_has_unit_idf() {
        let idx = bank(&[("1", "a b"), ("2", "a c"), ("3", "a")]);
        assert_eq!(idx.idf("a"), Some(1.0));
        assert_eq!(idx.df("a"), Some(3));
        assert_eq!(idx.idf("b"), Some((4.0f64 / 2.0).ln() + 1.0));
    }

    #[test]
    fn cosine_ordering() {
        let idx = bank(&[("2", "a c"), ("1", "a b")]);
        let hits = idx.callback(&turns(&["a b"]), 5);
        assert_eq!(idx.entries()[hits[0].0].id, "1");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert!(hits[0].1 > hits[1].1);
    }

    #[test]
    fn ties_break_by_id_and_unknown_terms_give_nothing() {
        let idx = bank(&[("b", "x y"), ("a", "x y")]);
        let hits = idx.callback(&turns(&["x"]), 5);
        assert_eq!(idx.entries()[hits[0].0].id, "a");
        assert!(idx.callback(&turns(&["zzz"]), 5).is_empty());
        assert!(idx.callback(&turns(&[""]), 5).is_empty());
    }

    #[test]
    fn only_last_three_turns_form_the_query() {
        let idx = bank(&[("1", "old"), ("2", "new")]);
        let hits = idx.callback(&turns(&["old", "new", "new", "new"]), 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(idx.entries()[hits[0].0].id, "2");
    }

    #[test]
    fn duplicate_ids_are_named() {
        let err = TfIdfIndex::build(parse_bank("x\ta\t1\nx\tb\t2\n").unwrap()).unwrap_err();
        assert!(err.to_string().contains("\"x\""));
        assert!(matches!(parse_bank("x\ta\n"), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn rebuild_is_identical() {
        let rows = [("1", "a b c"), ("2", "b c d"), ("3", "e")];
        assert_eq!(bank(&rows), bank(&rows));
    }
}
