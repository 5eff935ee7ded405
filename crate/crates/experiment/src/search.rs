//! Random search with an overfit-aware selection rule.

use std::collections::BTreeSet;
use std::path::Path;

use agc_core::augment::ChannelStats;
use agc_core::seed::{derive_seed, rng_from_seed, SeedPart};
use agc_nn::train::{train, StopReason, TrainState};
use agc_nn::{build_model, Arch, ModelConfig, Network};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{validation_split, DataBundle, TrainSettings};
use crate::hyper::{sample_hyperparams, HyperParams};
use crate::Result;

/// Losses closer than this count as tied.
pub const LOSS_TIE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n_configs: usize,
    pub gap_threshold: f64,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_configs: 10,
            gap_threshold: 0.15,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub params: HyperParams,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: Option<StopReason>,
    /// Set when training aborted; the loss is then infinite.
    pub failure: Option<String>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn gap(&self) -> f64 {
        self.train_acc - self.val_acc
    }

    fn from_state(index: usize, params: HyperParams, state: &TrainState) -> Self {
        let best = state.best();
        Self {
            index,
            params,
            train_acc: best.train_acc,
            val_acc: best.val_acc,
            val_loss: best.val_loss,
            best_epoch: state.best_epoch,
            epochs_run: state.epochs_run,
            stop_reason: Some(state.stop_reason),
            failure: None,
            wall_time_secs: state.wall_time_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// Runs that survived the gap filter (or all finite runs if none did).
    pub candidates: Vec<usize>,
    pub all_exceeded_gap: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub arch: Arch,
    pub config: SearchConfig,
    pub train_tumors: BTreeSet<String>,
    pub val_tumors: BTreeSet<String>,
    pub runs: Vec<RunRecord>,
    pub selection: Selection,
}

impl SearchResult {
    pub fn selected(&self) -> &RunRecord {
        &self.runs[self.selection.index]
    }
}

/// Drop runs whose gap exceeds the threshold (unless every run does), then
/// take the lowest validation loss; near-ties go to the smaller gap, then the
/// earlier index.
pub fn select_config(runs: &[RunRecord], gap_threshold: f64) -> Selection {
    assert!(!runs.is_empty(), "selection needs at least one run");
    let finite: Vec<&RunRecord> = runs.iter().filter(|r| r.val_loss.is_finite()).collect();
    let pool: Vec<&RunRecord> = if finite.is_empty() { runs.iter().collect() } else { finite };
    let survivors: Vec<&RunRecord> = pool.iter().copied().filter(|r| r.gap() <= gap_threshold).collect();
    let all_exceeded = survivors.is_empty();
    let candidates = if all_exceeded { pool } else { survivors };
    let min_loss = candidates.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let best = candidates
        .iter()
        .filter(|r| !(r.val_loss - min_loss > LOSS_TIE))
        .min_by(|a, b| a.gap().total_cmp(&b.gap()).then(a.index.cmp(&b.index)))
        .expect("candidate set is nonempty");
    let rationale = format!(
        "{} of {} runs within gap {gap_threshold}; lowest validation loss {:.6} at run {} (gap {:.4})",
        if all_exceeded { 0 } else { candidates.len() },
        runs.len(),
        best.val_loss,
        best.index,
        best.gap()
    );
    Selection {
        index: best.index,
        candidates: candidates.iter().map(|r| r.index).collect(),
        all_exceeded_gap: all_exceeded,
        rationale,
    }
}

/// Trains one model on the given tumor sets; augmentation applies to the
/// training draws only.
#[allow(clippy::too_many_arguments)]
pub fn fit_model(
    arch: Arch,
    params: &HyperParams,
    bundle: &DataBundle,
    train_tumors: &BTreeSet<String>,
    val_tumors: &BTreeSet<String>,
    settings: &TrainSettings,
    init_seed: u64,
    run_seed: u64,
) -> Result<(Network<f32>, TrainState, ChannelStats)> {
    let train_idx = bundle.indices_for(train_tumors);
    let val_idx = bundle.indices_for(val_tumors);
    let stats = bundle.channel_stats(&train_idx);
    let aug = settings.augment_train.then(|| (settings.augment.clone(), run_seed));
    let train_set = bundle.dataset(train_idx, stats, aug);
    let val_set = bundle.dataset(val_idx, stats, None);
    let mut net = build_model::<f32>(&ModelConfig::for_arch(arch, settings.input_size()), init_seed)?;
    let state = train(
        &mut net,
        &train_set,
        &val_set,
        &params.optimizer_spec(),
        &params.schedule_spec(settings.max_epochs),
        &settings.train_config(run_seed),
    )?;
    Ok((net, state, stats))
}

pub fn init_seed(seed: u64, arch: Arch) -> u64 {
    derive_seed(&[SeedPart::Int(seed), SeedPart::Str("init"), SeedPart::Str(arch.as_str())])
}

pub fn run_seed(seed: u64, arch: Arch, stage: &str, index: usize) -> u64 {
    derive_seed(&[
        SeedPart::Int(seed),
        SeedPart::Str(stage),
        SeedPart::Str(arch.as_str()),
        SeedPart::Int(index as u64),
    ])
}

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads; results keep index
/// order.
pub(crate) fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every index computed")).collect()
}

pub fn run_random_search(arch: Arch, bundle: &DataBundle, settings: &TrainSettings, cfg: &SearchConfig) -> Result<SearchResult> {
    settings.validate()?;
    if cfg.n_configs == 0 {
        return Err(crate::ExperimentError::InvalidConfig("n_configs must be at least 1".into()));
    }
    let pool = bundle.tumors_by_class(&bundle.tumors_in(agc_core::collection::Split::Train));
    let (train_tumors, val_tumors) = validation_split(&pool, settings.val_fraction, cfg.seed)?;
    let mut rng = rng_from_seed(derive_seed(&[
        SeedPart::Int(cfg.seed),
        SeedPart::Str("search"),
        SeedPart::Str(arch.as_str()),
    ]));
    let params: Vec<HyperParams> = (0..cfg.n_configs).map(|_| sample_hyperparams(&mut rng)).collect();
    let init = init_seed(cfg.seed, arch);
    let runs = parallel_map(cfg.n_configs, cfg.jobs, |i| {
        let p = params[i];
        let rs = run_seed(cfg.seed, arch, "search", i);
        match fit_model(arch, &p, bundle, &train_tumors, &val_tumors, settings, init, rs) {
            Ok((_, state, _)) => {
                let r = RunRecord::from_state(i, p, &state);
                info!("{arch} config {i}: val loss {:.4}, gap {:.3}", r.val_loss, r.gap());
                r
            }
            Err(e) => {
                warn!("{arch} config {i} failed: {e}");
                RunRecord {
                    index: i,
                    params: p,
                    train_acc: 0.0,
                    val_acc: 0.0,
                    val_loss: f64::INFINITY,
                    best_epoch: 0,
                    epochs_run: 0,
                    stop_reason: None,
                    failure: Some(e.to_string()),
                    wall_time_secs: 0.0,
                }
            }
        }
    });
    let selection = select_config(&runs, cfg.gap_threshold);
    Ok(SearchResult {
        arch,
        config: cfg.clone(),
        train_tumors,
        val_tumors,
        runs,
        selection,
    })
}

/// One row per config. Wall time is left out so the table is reproducible.
pub fn write_results_table(path: &Path, results: &[SearchResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "arch", "index", "lr", "scheduler", "optimizer", "weight_decay", "train_acc", "val_acc", "val_loss",
        "gap", "best_epoch", "epochs_run", "stop_reason", "failed", "selected",
    ])?;
    for res in results {
        for r in &res.runs {
            let stop = r.stop_reason.map(|s| format!("{s:?}")).unwrap_or_default();
            w.write_record([
                res.arch.as_str().to_string(),
                r.index.to_string(),
                format!("{}", r.params.lr),
                r.params.scheduler.to_string(),
                r.params.optimizer.to_string(),
                format!("{}", r.params.weight_decay),
                format!("{}", r.train_acc),
                format!("{}", r.val_acc),
                format!("{}", r.val_loss),
                format!("{}", r.gap()),
                r.best_epoch.to_string(),
                r.epochs_run.to_string(),
                stop,
                r.failure.is_some().to_string(),
                (r.index == res.selection.index).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
