use ctxmatch::metrics::{compute_metrics, RankingGroup};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 1-based rank of candidate `i`: one plus the number of candidates that
/// outrank it (higher score, or equal score and earlier position).
fn rank(g: &RankingGroup, i: usize) -> usize {
    let si = g.candidates[i].0;
    1 + g
        .candidates
        .iter()
        .enumerate()
        .filter(|&(j, c)| c.0 > si || (c.0 == si && j < i))
        .count()
}

fn brute_force(groups: &[RankingGroup]) -> (f64, [f64; 3], usize) {
    let (mut map, mut rec, mut n) = (0.0, [0.0; 3], 0usize);
    for g in groups {
        let pos: Vec<usize> = (0..g.candidates.len()).filter(|&i| g.candidates[i].1).collect();
        if pos.is_empty() {
            continue;
        }
        n += 1;
        let ranks: Vec<usize> = pos.iter().map(|&i| rank(g, i)).collect();
        let mut ap = 0.0;
        for &r in &ranks {
            let hits = ranks.iter().filter(|&&q| q <= r).count();
            ap += hits as f64 / r as f64;
        }
        map += ap / pos.len() as f64;
        for (slot, k) in [5usize, 2, 1].into_iter().enumerate() {
            if ranks.iter().any(|&r| r <= k) {
                rec[slot] += 1.0;
            }
        }
    }
    let n_f = n as f64;
    (map / n_f, rec.map(|r| r / n_f), n)
}

fn random_group(rng: &mut ChaCha8Rng, id: usize) -> RankingGroup {
    let len = rng.random_range(1..=15);
    let candidates = (0..len)
        .map(|_| {
            // Coarse scores make ties common.
            let s = rng.random_range(0..6) as f64 / 5.0;
            (s, rng.random_bool(0.3))
        })
        .collect();
    RankingGroup { group_id: id, candidates }
}

#[test]
fn agrees_with_brute_force_on_random_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let groups: Vec<RankingGroup> = (0..1000).map(|i| random_group(&mut rng, i)).collect();
    let fast = compute_metrics(&groups).unwrap();
    let (map, [r5, r2, r1], n) = brute_force(&groups);
    assert_eq!(fast.group_count, n);
    assert_eq!(fast.group_count + fast.skipped, 1000);
    for (a, b) in [(fast.map, map), (fast.r5, r5), (fast.r2, r2), (fast.r1, r1)] {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn raising_a_positive_never_lowers_ap(
        scores in prop::collection::vec(0.0f64..1.0, 1..12),
        labels in prop::collection::vec(any::<bool>(), 12),
        pick in 0usize..12,
        bump in 0.0f64..2.0,
    ) {
        let candidates: Vec<(f64, bool)> = scores.iter().zip(&labels).map(|(&s, &l)| (s, l)).collect();
        let positives: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].1).collect();
        prop_assume!(!positives.is_empty());
        let i = positives[pick % positives.len()];
        let before = RankingGroup { group_id: 0, candidates: candidates.clone() };
        let mut raised = candidates;
        raised[i].0 += bump;
        let after = RankingGroup { group_id: 0, candidates: raised };
        prop_assert!(after.average_precision() >= before.average_precision() - 1e-15);
    }

    #[test]
    fn ap_and_recall_lie_in_unit_interval(
        scores in prop::collection::vec(-5.0f64..5.0, 1..20),
        labels in prop::collection::vec(any::<bool>(), 20),
    ) {
        let g = RankingGroup {
            group_id: 0,
            candidates: scores.iter().zip(&labels).map(|(&s, &l)| (s, l)).collect(),
        };
        let r = compute_metrics(&[g]).unwrap();
        for v in [r.map, r.r1, r.r2, r.r5] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.r1 <= r.r2 && r.r2 <= r.r5);
    }
}
