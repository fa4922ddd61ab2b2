//! Ranking metrics over candidate groups: MAP and Recall@k.

use std::fmt;

use crate::error::{Error, Result};
use crate::text::ConversationExample;

/// One query context with its scored candidates, in original candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingGroup {
    pub group_id: usize,
    /// `(score, is_positive)`
    pub candidates: Vec<(f64, bool)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub r5: f64,
    pub r2: f64,
    pub r1: f64,
    /// Groups that entered the averages.
    pub group_count: usize,
    /// Groups skipped for having no positive candidate.
    pub skipped: usize,
}

impl fmt::Display for MetricsReport {
    /// `MAP<TAB>R@5<TAB>R@2<TAB>R@1`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}\t{:.4}\t{:.4}\t{:.4}", self.map, self.r5, self.r2, self.r1)
    }
}

impl RankingGroup {
    /// Labels in ranked order: score descending, ties by original position.
    pub fn ranked_labels(&self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| self.candidates[b].0.total_cmp(&self.candidates[a].0));
        order.into_iter().map(|i| self.candidates[i].1).collect()
    }

    pub fn average_precision(&self) -> f64 {
        let ranked = self.ranked_labels();
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (r, &pos) in ranked.iter().enumerate() {
            if pos {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
            }
        }
        if hits == 0 {
            0.0
        } else {
            sum / hits as f64
        }
    }

    pub fn hit_at(&self, k: usize) -> bool {
        self.ranked_labels().iter().take(k).any(|&p| p)
    }
}

pub fn compute_metrics(groups: &[RankingGroup]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let (mut map, mut r5, mut r2, mut r1) = (0.0, 0.0, 0.0, 0.0);
    for g in groups {
        if g.candidates.is_empty() {
            return Err(Error::Data(format!("group {} has no candidates", g.group_id)));
        }
        if !g.candidates.iter().any(|c| c.1) {
            report.skipped += 1;
            continue;
        }
        let ranked = g.ranked_labels();
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_hit = usize::MAX;
        for (r, &pos) in ranked.iter().enumerate() {
            if pos {
                hits += 1;
                ap += hits as f64 / (r + 1) as f64;
                first_hit = first_hit.min(r);
            }
        }
        map += ap / hits as f64;
        r5 += (first_hit < 5) as u8 as f64;
        r2 += (first_hit < 2) as u8 as f64;
        r1 += (first_hit < 1) as u8 as f64;
        report.group_count += 1;
    }
    if report.group_count > 0 {
        let n = report.group_count as f64;
        report.map = map / n;
        report.r5 = r5 / n;
        report.r2 = r2 / n;
        report.r1 = r1 / n;
    }
    Ok(report)
}

/// Collects scored examples into groups, keeping first-appearance order of
/// group ids and the original candidate order within each group.
pub fn group_scores(examples: &[ConversationExample], scores: &[f64]) -> Vec<RankingGroup> {
    let mut groups: Vec<RankingGroup> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (ex, &s) in examples.iter().zip(scores) {
        let slot = *index.entry(ex.group_id).or_insert_with(|| {
            groups.push(RankingGroup {
                group_id: ex.group_id,
                candidates: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].candidates.push((s, ex.label > 0.5));
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(labels: &[u8], scores: &[f64]) -> RankingGroup {
        RankingGroup {
            group_id: 0,
            candidates: scores.iter().zip(labels).map(|(&s, &l)| (s, l == 1)).collect(),
        }
    }

    #[test]
    fn worked_examples() {
        let g = group(&[0, 1, 0], &[0.1, 0.9, 0.5]);
        let r = compute_metrics(&[g]).unwrap();
        assert_eq!((r.map, r.r1), (1.0, 1.0));

        let g = group(&[1, 0], &[0.2, 0.8]);
        let r = compute_metrics(std::slice::from_ref(&g)).unwrap();
        assert_eq!((r.map, r.r1, r.r2), (0.5, 0.0, 1.0));
        assert_eq!(g.average_precision(), 0.5);
    }

    #[test]
    fn perfect_groups() {
        let gs: Vec<_> = (0..4).map(|_| group(&[1, 0, 0, 0, 0, 0], &[0.9, 0.1, 0.2, 0.3, 0.4, 0.5])).collect();
        let r = compute_metrics(&gs).unwrap();
        assert_eq!((r.map, r.r1, r.r5, r.group_count), (1.0, 1.0, 1.0, 4));
    }

    #[test]
    fn ties_keep_original_order() {
        let g = group(&[0, 1], &[0.5, 0.5]);
        assert!(!g.hit_at(1));
        let g = group(&[1, 0], &[0.5, 0.5]);
        assert!(g.hit_at(1));
    }

    #[test]
    fn no_positive_groups_are_skipped_and_empty_groups_fail() {
        let r = compute_metrics(&[group(&[0, 0], &[0.1, 0.2]), group(&[1, 0], &[0.9, 0.1])]).unwrap();
        assert_eq!((r.group_count, r.skipped, r.map), (1, 1, 1.0));
        let empty = RankingGroup {
            group_id: 3,
            candidates: vec![],
        };
        assert!(compute_metrics(&[empty]).is_err());
    }

    #[test]
    fn display_is_tab_separated() {
        let r = compute_metrics(&[group(&[1, 0], &[0.9, 0.1])]).unwrap();
        assert_eq!(r.to_string(), "1.0000\t1.0000\t1.0000\t1.0000");
    }
}
