mod common;

use common::{brute_adjust, brute_auc, brute_best, brute_candidates, brute_prf, random_metric_case};
use donut::metrics::{self, adjust, best_fscore, flags_at, prf_at_threshold};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for case_no in 0..200 {
        let c = random_metric_case(&mut r);
        for th in brute_candidates(&c) {
            let fast = adjust(&c.truth, &flags_at(&c.scores, th));
            assert_eq!(fast, brute_adjust(&c, th), "case {case_no} threshold {th}");
            let p = prf_at_threshold(&c.truth, &c.scores, th);
            assert_eq!((p.precision, p.recall, p.fscore), brute_prf(&c, th), "case {case_no}");
        }
        let best = best_fscore(&c.truth, &c.scores);
        assert_eq!((best.fscore, best.threshold), brute_best(&c), "case {case_no}");
        for row in &best.table {
            let (p, rc, f) = brute_prf(&c, row.threshold);
            assert_eq!((row.precision, row.recall, row.fscore), (p, rc, f));
        }
        assert_eq!(metrics::auc(&c.truth, &c.scores).ok(), brute_auc(&c), "case {case_no}");
    }
}

fn raw_prf(c: &common::MetricCase, th: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..c.scores.len() {
        if c.truth.missing[i] {
            continue;
        }
        let Some(s) = c.scores[i] else { continue };
        match (c.truth.anomaly[i], s >= th) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

proptest! {
    #[test]
    fn adjustment_never_lowers_precision_or_recall(seed in any::<u64>()) {
        let c = random_metric_case(&mut ChaCha8Rng::seed_from_u64(seed));
        for th in brute_candidates(&c) {
            let adj = prf_at_threshold(&c.truth, &c.scores, th);
            let (p, r) = raw_prf(&c, th);
            prop_assert!(adj.recall >= r);
            prop_assert!(adj.precision >= p);
        }
    }

    #[test]
    fn best_fscore_dominates_every_threshold(seed in any::<u64>(), th in -1.0f64..7.0) {
        let c = random_metric_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let best = best_fscore(&c.truth, &c.scores);
        prop_assert!(best.fscore >= prf_at_threshold(&c.truth, &c.scores, th).fscore);
    }

    #[test]
    fn missing_points_are_ignored(seed in any::<u64>(), th in -1.0f64..7.0, junk in -100.0f64..100.0) {
        let mut c = random_metric_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let before = prf_at_threshold(&c.truth, &c.scores, th);
        let before_best = best_fscore(&c.truth, &c.scores).fscore;
        for i in 0..c.scores.len() {
            if c.truth.missing[i] {
                c.scores[i] = Some(junk);
            }
        }
        prop_assert_eq!(prf_at_threshold(&c.truth, &c.scores, th), before);
        prop_assert_eq!(best_fscore(&c.truth, &c.scores).fscore, before_best);
    }
}
