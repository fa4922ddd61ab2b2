//! Synthetic response-selection tasks with a known lexical matching rule.
//!
//! Every group holds one context and `group_size` candidates. The positive
//! candidate shares `positive_overlap` tokens with the last turn; negatives
//! share `negative_overlap`. Tokens come from a pool shared by both domains
//! (`w*`) mixed with a domain-specific pool (`s*` for source, `t*` for
//! target), which gives the two domains different surface vocabularies.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::text::{Domain, RawExample};

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapTask {
    pub groups: usize,
    pub group_size: usize,
    pub turns: usize,
    pub turn_len: usize,
    pub shared_vocab: usize,
    pub domain_vocab: usize,
    /// Probability that a token is drawn from the domain-specific pool.
    pub domain_mix: f64,
    pub positive_overlap: usize,
    pub negative_overlap: usize,
}

impl Default for OverlapTask {
    fn default() -> Self {
        OverlapTask {
            groups: 20,
            group_size: 10,
            turns: 3,
            turn_len: 6,
            shared_vocab: 60,
            domain_vocab: 0,
            domain_mix: 0.0,
            positive_overlap: 2,
            negative_overlap: 0,
        }
    }
}

fn prefix(domain: Domain) -> &'static str {
    match domain {
        Domain::Source => "s",
        Domain::Target => "t",
    }
}

impl OverlapTask {
    fn token(&self, domain: Domain, rng: &mut impl Rng) -> String {
        if self.domain_vocab > 0 && rng.random_bool(self.domain_mix) {
            format!("{}{}", prefix(domain), rng.random_range(0..self.domain_vocab))
        } else {
            format!("w{}", rng.random_range(0..self.shared_vocab))
        }
    }

    /// `n` distinct tokens, none of which is in `avoid`.
    fn fresh(&self, n: usize, avoid: &[String], domain: Domain, rng: &mut impl Rng) -> Vec<String> {
        let mut out: Vec<String> = Vec::with_capacity(n);
        while out.len() < n {
            let t = self.token(domain, rng);
            if !avoid.contains(&t) && !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }

    fn candidate(&self, last: &[String], overlap: usize, domain: Domain, rng: &mut impl Rng) -> String {
        let mut toks: Vec<String> = last.choose_multiple(rng, overlap).cloned().collect();
        toks.extend(self.fresh(self.turn_len - overlap, last, domain, rng));
        toks.shuffle(rng);
        toks.join(" ")
    }

    /// Rows in group order; the positive sits at a random position per group.
    pub fn generate(&self, domain: Domain, rng: &mut impl Rng) -> Vec<RawExample> {
        assert!(self.positive_overlap <= self.turn_len && self.negative_overlap < self.positive_overlap);
        let mut rows = Vec::with_capacity(self.groups * self.group_size);
        for _ in 0..self.groups {
            let turns: Vec<Vec<String>> = (0..self.turns)
                .map(|_| self.fresh(self.turn_len, &[], domain, rng))
                .collect();
            let last = turns.last().unwrap();
            let context: Vec<String> = turns.iter().map(|t| t.join(" ")).collect();
            let context: Vec<&str> = context.iter().map(String::as_str).collect();
            let pos = rng.random_range(0..self.group_size);
            for c in 0..self.group_size {
                let (label, overlap) = if c == pos {
                    ("1", self.positive_overlap)
                } else {
                    ("0", self.negative_overlap)
                };
                let cand = self.candidate(last, overlap, domain, rng);
                rows.push(RawExample::new(label, &context, &cand));
            }
        }
        rows
    }
}

/// Serializes rows in the dataset TSV layout.
pub fn to_tsv(rows: &[RawExample]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&r.label);
        for t in &r.turns {
            s.push('\t');
            s.push_str(t);
        }
        s.push('\t');
        s.push_str(&r.candidate);
        s.push('\n');
    }
    s
}
