use std::collections::{BTreeMap, BTreeSet};

use agc_core::phantom::BorrmannClass;
use agc_experiment::hyper::{sample_hyperparams, HyperParams, LR_RANGE};
use agc_experiment::kfold::stratified_kfold;
use agc_experiment::search::{select_config, RunRecord};
use agc_experiment::ExperimentError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(index: usize, val_loss: f64, train_acc: f64, val_acc: f64) -> RunRecord {
    RunRecord {
        index,
        params: HyperParams::reference_dilated(),
        train_acc,
        val_acc,
        val_loss,
        best_epoch: 0,
        epochs_run: 1,
        stop_reason: None,
        failure: None,
        wall_time_secs: 0.0,
    }
}

#[test]
fn samples_stay_in_bounds_and_are_log_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<HyperParams> = (0..10_000).map(|_| sample_hyperparams(&mut rng)).collect();
    assert!(samples.iter().all(HyperParams::in_bounds));
    let low = samples.iter().filter(|h| h.lr < 0.01).count() as f64 / 1e4;
    assert!((low - 0.5).abs() < 0.05, "{low}");
    assert!(samples.iter().any(|h| h.lr < LR_RANGE[0] * 1.1));
    let a = sample_hyperparams(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, sample_hyperparams(&mut ChaCha8Rng::seed_from_u64(5)));
}

#[test]
fn single_run_is_selected() {
    assert_eq!(select_config(&[run(0, 9.0, 1.0, 0.1)], 0.15).index, 0);
}

#[test]
fn gap_filter_beats_raw_loss() {
    let runs = [run(0, 0.5, 0.9, 0.6), run(1, 0.6, 0.8, 0.75)];
    let s = select_config(&runs, 0.15);
    assert_eq!(s.index, 1);
    assert!(!s.all_exceeded_gap);
}

#[test]
fn all_overfit_falls_back_to_loss() {
    let runs = [run(0, 0.7, 1.0, 0.5), run(1, 0.4, 1.0, 0.6), run(2, 0.9, 1.0, 0.2)];
    let s = select_config(&runs, 0.15);
    assert!(s.all_exceeded_gap);
    assert_eq!(s.index, 1);
}

#[test]
fn ties_break_on_gap_then_index() {
    let runs = [run(0, 0.5, 0.8, 0.7), run(1, 0.5 + 5e-7, 0.75, 0.7), run(2, 0.5, 0.75, 0.7)];
    assert_eq!(select_config(&runs, 0.15).index, 1);
    let runs = [run(0, 0.5, 0.8, 0.7), run(1, 0.5, 0.8, 0.7)];
    assert_eq!(select_config(&runs, 0.15).index, 0);
}

#[test]
fn failed_runs_are_never_preferred() {
    let runs = [run(0, f64::INFINITY, 0.0, 0.0), run(1, 1.2, 0.5, 0.45)];
    assert_eq!(select_config(&runs, 0.15).index, 1);
}

#[test]
fn selection_is_a_function_of_the_stored_table() {
    let runs: Vec<RunRecord> = (0..12)
        .map(|i| run(i, 0.3 + (i as f64 * 0.37) % 0.5, 0.9, 0.6 + (i % 4) as f64 * 0.08))
        .collect();
    let first = select_config(&runs, 0.15);
    let stored = serde_json::to_string(&runs).unwrap();
    let back: Vec<RunRecord> = serde_json::from_str(&stored).unwrap();
    assert_eq!(select_config(&back, 0.15), first);
}

fn tumors(per_class: usize) -> BTreeMap<BorrmannClass, Vec<String>> {
    BorrmannClass::ALL
        .into_iter()
        .map(|c| (c, (0..per_class).map(|i| format!("{}-{i:02}", c.name())).collect()))
        .collect()
}

#[test]
fn kfold_partitions_tumors_by_class() {
    let by_class = tumors(8);
    let folds = stratified_kfold(&by_class, 5, 3).unwrap();
    assert_eq!(folds.len(), 5);
    for class in BorrmannClass::ALL {
        let mut sizes: Vec<usize> = folds
            .iter()
            .map(|f| f.iter().filter(|id| by_class[&class].contains(id)).count())
            .collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![2, 2, 2, 1, 1]);
    }
    let union: BTreeSet<&String> = folds.iter().flatten().collect();
    assert_eq!(union.len(), 32);
    for i in 0..5 {
        for j in i + 1..5 {
            assert!(folds[i].is_disjoint(&folds[j]));
        }
    }
    assert_eq!(folds, stratified_kfold(&by_class, 5, 3).unwrap());
    assert_ne!(folds, stratified_kfold(&by_class, 5, 4).unwrap());
}

#[test]
fn kfold_needs_k_tumors_per_class() {
    assert!(matches!(
        stratified_kfold(&tumors(4), 5, 0),
        Err(ExperimentError::InsufficientPhantoms { count: 4, need: 5, .. })
    ));
}
