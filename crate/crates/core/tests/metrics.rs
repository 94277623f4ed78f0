//! Ranking metrics against brute-force evaluation of their defining sums.

use dverec_core::eval::{hit_ratio, ndcg, NdcgFormula, RankedEvalCase};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 101;
const TEST_ITEM: usize = 50;

/// Candidates 0..101 scored so the test item lands at `rank`.
fn case_with_rank(rank: usize) -> RankedEvalCase {
    let mut others: Vec<usize> = (0..N).filter(|&c| c != TEST_ITEM).collect();
    // a fixed shuffle so rank is not tied to item order
    others.sort_by_key(|&c| (c * 37) % N);
    let mut scores = vec![0.0; N];
    let mut order = others.clone();
    order.insert(rank - 1, TEST_ITEM);
    for (pos, &c) in order.iter().enumerate() {
        scores[c] = (N - pos) as f64;
    }
    RankedEvalCase::new(0, TEST_ITEM, (0..N).collect(), scores).unwrap()
}

/// Full argsort, then the defining sums over the first `k` positions.
fn brute(case: &RankedEvalCase, k: usize) -> (f64, f64, f64) {
    let mut idx: Vec<usize> = (0..case.candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        case.scores[b]
            .partial_cmp(&case.scores[a])
            .unwrap()
            .then(case.candidates[a].cmp(&case.candidates[b]))
    });
    let ranked: Vec<usize> = idx.iter().map(|&i| case.candidates[i]).collect();
    let rel = |i: usize| if ranked[i - 1] == case.test_item { 1.0 } else { 0.0 };
    let hr = (1..=k).map(rel).sum::<f64>();
    let dcg: f64 = (1..=k).map(|i| rel(i) / ((i + 1) as f64).log2()).sum();
    let ideal_eq7: f64 = (1..=k).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
    (hr, dcg / ideal_eq7, dcg)
}

#[test]
fn ndcg_matches_defining_sums_on_every_rank() {
    check_ndcg_matches_defining_sums_on_every_rank()
}

pub fn check_ndcg_matches_defining_sums_on_every_rank() {
    for rank in 1..=N {
        let case = case_with_rank(rank);
        assert_eq!(case.rank_of_test(), rank);
        for k in [1, 5, 10] {
            let (hr, eq7, single) = brute(&case, k);
            assert_eq!(hit_ratio(&case, k).unwrap(), hr, "rank {rank} k {k}");
            let a = ndcg(&case, k, NdcgFormula::PaperEq7).unwrap();
            let b = ndcg(&case, k, NdcgFormula::SingleRelevant).unwrap();
            assert!((a - eq7).abs() <= 1e-12, "paper_eq7 rank {rank} k {k}: {a} vs {eq7}");
            assert!((b - single).abs() <= 1e-12, "single rank {rank} k {k}: {b} vs {single}");
        }
    }
}

#[test]
fn rank_one_values() {
    let case = case_with_rank(1);
    assert_eq!(ndcg(&case, 10, NdcgFormula::SingleRelevant).unwrap(), 1.0);
    let denom: f64 = (1..=10).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
    let eq7 = ndcg(&case, 10, NdcgFormula::PaperEq7).unwrap();
    assert!((eq7 - 1.0 / denom).abs() < 1e-15);
    assert!((eq7 - 0.2201).abs() < 5e-5);
    // the ideal-sum form is not monotone in k: its denominator grows
    assert_eq!(ndcg(&case, 1, NdcgFormula::PaperEq7).unwrap(), 1.0);
    assert!(eq7 < 1.0);
}

#[test]
fn hit_ratio_boundaries() {
    check_hit_ratio_boundaries()
}

pub fn check_hit_ratio_boundaries() {
    for k in [1, 5, 10, 100] {
        assert_eq!(hit_ratio(&case_with_rank(k), k).unwrap(), 1.0);
        assert_eq!(hit_ratio(&case_with_rank(k + 1), k).unwrap(), 0.0);
        assert_eq!(ndcg(&case_with_rank(k + 1), k, NdcgFormula::SingleRelevant).unwrap(), 0.0);
        assert_eq!(ndcg(&case_with_rank(k + 1), k, NdcgFormula::PaperEq7).unwrap(), 0.0);
    }
}

#[test]
fn ties_rank_lower_id_first() {
    let scores = vec![0.5; 5];
    let c = RankedEvalCase::new(0, 3, vec![4, 3, 2, 1, 0], scores).unwrap();
    assert_eq!(c.rank_of_test(), 4);
}

#[test]
fn perfect_scorer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let mut scores: Vec<f64> = (0..N).map(|_| rng.random_range(0.0..1.0)).collect();
        scores[TEST_ITEM] = 2.0;
        let c = RankedEvalCase::new(0, TEST_ITEM, (0..N).collect(), scores).unwrap();
        assert_eq!(hit_ratio(&c, 10).unwrap(), 1.0);
    }
}

#[test]
fn random_scorer_hit_ratio() {
    check_random_scorer_hit_ratio()
}

pub fn check_random_scorer_hit_ratio() {
    let users = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut hits = 0.0;
    for u in 0..users {
        let scores: Vec<f64> = (0..N).map(|_| rng.random::<f64>()).collect();
        let c = RankedEvalCase::new(u, TEST_ITEM, (0..N).collect(), scores).unwrap();
        hits += hit_ratio(&c, 10).unwrap();
    }
    let p = 10.0 / N as f64;
    let hr = hits / users as f64;
    let sigma = (p * (1.0 - p) / users as f64).sqrt();
    assert!((hr - p).abs() <= 3.0 * sigma, "HR@10 {hr} vs {p} (3 sigma = {})", 3.0 * sigma);
}

#[test]
fn invalid_cases() {
    assert!(RankedEvalCase::new(0, 9, vec![0, 1], vec![0.1, 0.2]).is_err());
    assert!(RankedEvalCase::new(0, 1, vec![1, 1], vec![0.1, 0.2]).is_err());
    assert!(RankedEvalCase::new(0, 1, vec![0, 1], vec![0.1]).is_err());
    assert!(RankedEvalCase::new(0, 1, vec![0, 1], vec![0.1, f64::NAN]).is_err());
    let c = case_with_rank(3);
    assert!(hit_ratio(&c, 0).is_err());
    assert!(ndcg(&c, N + 1, NdcgFormula::PaperEq7).is_err());
}

fn arb_case() -> impl Strategy<Value = RankedEvalCase> {
    (2usize..40)
        .prop_flat_map(|n| (Just(n), 0..n, prop::collection::vec(-5.0f64..5.0, n)))
        .prop_map(|(n, t, scores)| RankedEvalCase::new(0, t, (0..n).collect(), scores).unwrap())
}

const FORMULAS: [NdcgFormula; 2] = [NdcgFormula::PaperEq7, NdcgFormula::SingleRelevant];

proptest! {
    #[test]
    fn metrics_monotone_in_k(case in arb_case()) {
        let n = case.candidates.len();
        for k in 1..n {
            prop_assert!(hit_ratio(&case, k).unwrap() <= hit_ratio(&case, k + 1).unwrap());
        }
        // single_relevant is monotone; the ideal-sum denominator grows with k
        for k in 1..n {
            let a = ndcg(&case, k, NdcgFormula::SingleRelevant).unwrap();
            let b = ndcg(&case, k + 1, NdcgFormula::SingleRelevant).unwrap();
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn metrics_bounded(case in arb_case(), kk in 0usize..100) {
        let k = 1 + kk % case.candidates.len();
        let hr = hit_ratio(&case, k).unwrap();
        prop_assert!(hr == 0.0 || hr == 1.0);
        for f in FORMULAS {
            let v = ndcg(&case, k, f).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn shift_invariance(case in arb_case(), shift in -100.0f64..100.0, kk in 0usize..100) {
        let k = 1 + kk % case.candidates.len();
        // shifts stay exact on a dyadic grid
        let rounded: Vec<f64> = case.scores.iter().map(|s| (s * 64.0).round() / 64.0).collect();
        let shift = (shift * 64.0).round() / 64.0;
        let a = RankedEvalCase::new(0, case.test_item, case.candidates.clone(), rounded.clone()).unwrap();
        let b = RankedEvalCase::new(0, case.test_item, case.candidates.clone(), rounded.iter().map(|s| s + shift).collect()).unwrap();
        prop_assert_eq!(a.rank_of_test(), b.rank_of_test());
        prop_assert_eq!(hit_ratio(&a, k).unwrap(), hit_ratio(&b, k).unwrap());
        for f in FORMULAS {
            prop_assert_eq!(ndcg(&a, k, f).unwrap(), ndcg(&b, k, f).unwrap());
        }
    }

    #[test]
    fn ndcg_strictly_decreasing_in_rank(k in 1usize..=N) {
        for f in FORMULAS {
            let mut prev = ndcg(&case_with_rank(1), k, f).unwrap();
            for rank in 2..=k {
                let v = ndcg(&case_with_rank(rank), k, f).unwrap();
                prop_assert!(v < prev, "{:?} k {} rank {}", f, k, rank);
                prev = v;
            }
        }
    }
}
