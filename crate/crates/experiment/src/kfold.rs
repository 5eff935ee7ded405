//! Tumor-level stratified k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use agc_core::collection::Split;
use agc_core::phantom::BorrmannClass;
use agc_core::seed::{derive_seed, rng_from_seed, SeedPart};
use agc_nn::train::EpochRecord;
use agc_nn::Arch;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DataBundle, TrainSettings};
use crate::hyper::HyperParams;
use crate::search::{fit_model, init_seed, parallel_map, run_seed};
use crate::{ExperimentError, Result};

/// Per class, a seeded shuffle dealt round-robin over `k` folds.
pub fn stratified_kfold(
    by_class: &BTreeMap<BorrmannClass, Vec<String>>,
    k: usize,
    seed: u64,
) -> Result<Vec<BTreeSet<String>>> {
    if k < 2 {
        return Err(ExperimentError::InvalidConfig("k must be at least 2".into()));
    }
    let mut folds = vec![BTreeSet::new(); k];
    for class in BorrmannClass::ALL {
        let mut ids = by_class.get(&class).cloned().unwrap_or_default();
        if ids.len() < k {
            return Err(ExperimentError::InsufficientPhantoms {
                class: class.name().into(),
                count: ids.len(),
                need: k,
            });
        }
        ids.shuffle(&mut rng_from_seed(derive_seed(&[
            SeedPart::Int(seed),
            SeedPart::Str("kfold"),
            SeedPart::Str(class.name()),
        ])));
        for (i, id) in ids.into_iter().enumerate() {
            folds[i % k].insert(id);
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub val_tumors: BTreeSet<String>,
    pub best_epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Across-fold accuracy statistics for one epoch, over the folds that ran it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub folds: usize,
    pub train_acc_mean: f64,
    pub train_acc_std: f64,
    pub val_acc_mean: f64,
    pub val_acc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub arch: Arch,
    pub params: HyperParams,
    pub folds: Vec<FoldRecord>,
    pub curves: Vec<CurvePoint>,
    pub val_acc_mean: f64,
    pub val_acc_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn curves(folds: &[FoldRecord]) -> Vec<CurvePoint> {
    let longest = folds.iter().map(|f| f.history.len()).max().unwrap_or(0);
    (0..longest)
        .map(|e| {
            let recs: Vec<&EpochRecord> = folds.iter().filter_map(|f| f.history.get(e)).collect();
            let (tm, ts) = mean_std(&recs.iter().map(|r| r.train_acc).collect::<Vec<_>>());
            let (vm, vs) = mean_std(&recs.iter().map(|r| r.val_acc).collect::<Vec<_>>());
            CurvePoint {
                epoch: e,
                folds: recs.len(),
                train_acc_mean: tm,
                train_acc_std: ts,
                val_acc_mean: vm,
                val_acc_std: vs,
            }
        })
        .collect()
}

/// Each fold in turn is the validation set; the others train.
pub fn run_cross_validation(
    arch: Arch,
    params: &HyperParams,
    bundle: &DataBundle,
    settings: &TrainSettings,
    k: usize,
    seed: u64,
    jobs: usize,
) -> Result<CvResult> {
    settings.validate()?;
    let train = bundle.tumors_in(Split::Train);
    let folds = stratified_kfold(&bundle.tumors_by_class(&train), k, seed)?;
    let init = init_seed(seed, arch);
    let records = parallel_map(k, jobs, |f| -> Result<FoldRecord> {
        let val = &folds[f];
        let rest: BTreeSet<String> = train.difference(val).cloned().collect();
        let (_, state, _) = fit_model(arch, params, bundle, &rest, val, settings, init, run_seed(seed, arch, "cv", f))?;
        let best = state.best().clone();
        Ok(FoldRecord {
            fold: f,
            val_tumors: val.clone(),
            best_epoch: state.best_epoch,
            train_acc: best.train_acc,
            val_acc: best.val_acc,
            val_loss: best.val_loss,
            history: state.history,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (val_acc_mean, val_acc_std) = mean_std(&records.iter().map(|r| r.val_acc).collect::<Vec<_>>());
    Ok(CvResult {
        arch,
        params: *params,
        curves: curves(&records),
        folds: records,
        val_acc_mean,
        val_acc_std,
    })
}

pub fn write_kfold_curves(path: &Path, results: &[CvResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "arch", "epoch", "folds", "train_acc_mean", "train_acc_std", "val_acc_mean", "val_acc_std",
    ])?;
    for res in results {
        for p in &res.curves {
            w.write_record([
                res.arch.as_str().to_string(),
                p.epoch.to_string(),
                p.folds.to_string(),
                format!("{}", p.train_acc_mean),
                format!("{}", p.train_acc_std),
                format!("{}", p.val_acc_mean),
                format!("{}", p.val_acc_std),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
