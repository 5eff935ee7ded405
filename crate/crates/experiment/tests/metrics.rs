use agc_experiment::metrics::{compute_metrics, rank_auc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ROC built by sweeping every distinct score as a threshold, integrated with
/// the trapezoid rule.
fn trapezoid_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = scores.iter().zip(positive).filter(|(s, &b)| b && **s >= t).count() as f64;
        let fp = scores.iter().zip(positive).filter(|(s, &b)| !b && **s >= t).count() as f64;
        pts.push((fp / n, tp / p));
    }
    Some(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

fn oracle_prf(truth: &[usize], pred: &[usize]) -> (f64, f64, f64, f64) {
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..4 {
        let tp = truth.iter().zip(pred).filter(|(t, q)| **t == c && **q == c).count();
        let fp = truth.iter().zip(pred).filter(|(t, q)| **t != c && **q == c).count();
        let fne = truth.iter().zip(pred).filter(|(t, q)| **t == c && **q != c).count();
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        p += div(tp, tp + fp);
        r += div(tp, tp + fne);
        f += div(2 * tp, 2 * tp + fp + fne);
    }
    let acc = truth.iter().zip(pred).filter(|(t, q)| t == q).count() as f64 / truth.len() as f64;
    (acc, p / 4.0, r / 4.0, f / 4.0)
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, Vec<Vec<f64>>) {
    let n = rng.random_range(1..=64);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    // Coarse scores so ties are common.
    let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(0..6) as f64 / 5.0).collect()).collect();
    let pred = truth
        .iter()
        .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..4) })
        .collect();
    (truth, pred, scores)
}

#[test]
fn matches_brute_force_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (truth, pred, scores) = random_case(&mut rng);
        let m = compute_metrics(&truth, &pred, &scores).unwrap();
        let (acc, p, r, f) = oracle_prf(&truth, &pred);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (acc, p, r, f));
        let mut defined = Vec::new();
        for c in 0..4 {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            let oracle = trapezoid_auc(&col, &pos);
            match (oracle, m.per_class_auc[c]) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                    defined.push(a);
                }
                (None, None) => {}
                other => panic!("definedness differs: {other:?}"),
            }
        }
        if !defined.is_empty() {
            let mean = defined.iter().sum::<f64>() / defined.len() as f64;
            assert!((m.auc - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn rank_auc_small_cases() {
    assert_eq!(rank_auc(&[0.1, 0.9], &[false, true]), Some(1.0));
    assert_eq!(rank_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
    assert_eq!(rank_auc(&[0.9, 0.1, 0.4], &[false, true, true]), Some(0.0));
    assert_eq!(rank_auc(&[0.3], &[true]), None);
}

proptest! {
    #[test]
    fn report_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (truth, pred, scores) = random_case(&mut rng);
        let m = compute_metrics(&truth, &pred, &scores).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1, m.auc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let trace: usize = (0..4).map(|c| m.confusion[c][c]).sum();
        prop_assert_eq!(m.accuracy, trace as f64 / truth.len() as f64);
        for c in 0..4 {
            let support = truth.iter().filter(|&&t| t == c).count();
            prop_assert_eq!(m.confusion[c].iter().sum::<usize>(), support);
            let row: f64 = m.confusion_normalized[c].iter().sum();
            prop_assert!(support == 0 || (row - 1.0).abs() < 1e-12);
        }
    }
}
