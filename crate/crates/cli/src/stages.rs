//! One function per pipeline stage. Stages talk to each other only through
//! files under `output_dir`.

use std::path::{Path, PathBuf};

use agc_core::collection::{collect_dataset, split_train_test, DatasetManifest, Split};
use agc_core::phantom::{build_phantom_bank_with, PhantomSpec};
use agc_core::workcell::{calibrate_scene, WorkcellScene};
use agc_experiment::kfold::write_kfold_curves;
use agc_experiment::metrics::MetricsReport;
use agc_experiment::report::{EvaluationReport, CLASS_NAMES};
use agc_experiment::search::write_results_table;
use agc_experiment::{
    evaluate_final, run_cross_validation, run_random_search, train_final, CvResult, DataBundle, HyperParams,
    SearchResult,
};
use agc_nn::checkpoint::save_checkpoint;
use agc_nn::train::TrainState;
use agc_nn::Arch;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Stage(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// `value` as a JSON object with the run config added under `run_config`.
fn with_config(cfg: &RunConfig, value: &impl Serialize) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("run_config".into(), serde_json::to_value(cfg)?);
            Ok(v)
        }
        _ => Err(CliError::Stage("artifact body must be a JSON object".into())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankEntry {
    pub phantom_id: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankIndex {
    pub phantoms: Vec<BankEntry>,
}

pub fn gen_phantoms(cfg: &RunConfig) -> Result<Vec<PhantomSpec>> {
    let bank = build_phantom_bank_with(cfg.master_seed, cfg.phantoms.per_class, cfg.phantoms.grid)?;
    let dir = cfg.phantom_dir();
    std::fs::create_dir_all(&dir)?;
    let mut index = BankIndex { phantoms: Vec::new() };
    for spec in &bank {
        let file = format!("{}.phantom", spec.phantom_id);
        spec.save(&dir.join(&file))?;
        index.phantoms.push(BankEntry {
            phantom_id: spec.phantom_id.clone(),
            file,
        });
    }
    write_json(&dir.join("bank.json"), &with_config(cfg, &index)?)?;
    info!("wrote {} phantoms to {}", bank.len(), dir.display());
    Ok(bank)
}

pub fn load_bank(cfg: &RunConfig) -> Result<Vec<PhantomSpec>> {
    let dir = cfg.phantom_dir();
    let index: BankIndex = read_json(&dir.join("bank.json"))?;
    index
        .phantoms
        .iter()
        .map(|e| Ok(PhantomSpec::load(&dir.join(&e.file))?))
        .collect()
}

pub fn calibrate(cfg: &RunConfig) -> Result<PathBuf> {
    let seed = cfg.stage_seed("calibrate");
    let scene = WorkcellScene::generate(&cfg.calibration, seed)?;
    let views = scene.observe(cfg.calibration.noise_px, seed)?;
    let report = calibrate_scene(&scene, &views, cfg.calibration.noise_px, cfg.calibration.pose_intrinsics)?;
    info!(
        "T_BT error {:.3e} rad / {:.3e} mm, T_RC error {:.3e} rad / {:.3e} mm",
        report.t_bt_error.rot_rad, report.t_bt_error.trans_mm, report.t_rc_error.rot_rad, report.t_rc_error.trans_mm
    );
    #[derive(Serialize)]
    struct Out<'a> {
        report: &'a agc_core::workcell::CalibrationReport,
        scene: &'a WorkcellScene,
        views: &'a [Vec<agc_core::camera::Correspondence>],
    }
    let path = cfg.output_dir.join("calibration").join("calibration.json");
    write_json(&path, &with_config(cfg, &Out {
        report: &report,
        scene: &scene,
        views: &views,
    })?)?;
    Ok(path)
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.dataset_dir().join("manifest.json")
}

fn split_manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.dataset_dir().join("manifest_split.json")
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(CliError::Stage(format!("manifest {} not found", path.display())));
    }
    Ok(DatasetManifest::load(path)?)
}

pub fn collect(cfg: &RunConfig) -> Result<DatasetManifest> {
    let bank = load_bank(cfg)?;
    let dir = cfg.dataset_dir();
    let manifest = collect_dataset(&bank, &cfg.collection, &cfg.sensor, &dir)?;
    let violations = manifest.force_violations().len();
    if violations > 0 {
        warn!("{violations} entries violate the force band");
    }
    write_json(&manifest_path(cfg), &with_config(cfg, &manifest)?)?;
    info!("collected {} images into {}", manifest.entries.len(), dir.display());
    Ok(manifest)
}

pub fn split(cfg: &RunConfig) -> Result<DatasetManifest> {
    let manifest = load_manifest(&manifest_path(cfg))?;
    let out = split_train_test(&manifest, cfg.stage_seed("split"))?;
    write_json(&split_manifest_path(cfg), &with_config(cfg, &out)?)?;
    info!(
        "split: {} train images ({} tumors), {} test images ({} tumors)",
        out.entries_in(Split::Train).count(),
        out.phantom_ids(Split::Train).len(),
        out.entries_in(Split::Test).count(),
        out.phantom_ids(Split::Test).len()
    );
    Ok(out)
}

pub fn load_bundle(cfg: &RunConfig) -> Result<DataBundle> {
    let manifest = load_manifest(&split_manifest_path(cfg))?;
    Ok(DataBundle::load(manifest, &cfg.dataset_dir(), cfg.train.augment.target_size)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SearchFile {
    results: Vec<SearchResult>,
}

pub fn search(cfg: &RunConfig) -> Result<Vec<SearchResult>> {
    let bundle = load_bundle(cfg)?;
    let mut results = Vec::new();
    for &arch in &cfg.archs {
        info!("search: {arch}, {} configs", cfg.search.n_configs);
        let r = run_random_search(arch, &bundle, &cfg.train, &cfg.search)?;
        info!("search: {arch} selected config {} ({})", r.selection.index, r.selection.rationale);
        results.push(r);
    }
    let dir = cfg.search_dir();
    std::fs::create_dir_all(&dir)?;
    write_results_table(&dir.join("results_table.csv"), &results)?;
    let file = SearchFile { results };
    write_json(&dir.join("search_results.json"), &with_config(cfg, &file)?)?;
    Ok(file.results)
}

/// Pinned hyperparameters if configured, else the search selection.
pub fn params_for(cfg: &RunConfig, arch: Arch) -> Result<HyperParams> {
    if let Some(p) = cfg.hyperparams {
        return Ok(p);
    }
    let path = cfg.search_dir().join("search_results.json");
    if !path.is_file() {
        return Err(CliError::Stage(format!(
            "no search results at {}; run `search` first or set `hyperparams` in the config",
            path.display()
        )));
    }
    let file: SearchFile = read_json(&path)?;
    file.results
        .iter()
        .find(|r| r.arch == arch)
        .map(|r| r.selected().params)
        .ok_or_else(|| CliError::Stage(format!("search results hold no entry for {arch}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CvFile {
    k: usize,
    results: Vec<CvResult>,
}

pub fn cv(cfg: &RunConfig) -> Result<Vec<CvResult>> {
    let bundle = load_bundle(cfg)?;
    let mut results = Vec::new();
    for &arch in &cfg.archs {
        let params = params_for(cfg, arch)?;
        let r = run_cross_validation(arch, &params, &bundle, &cfg.train, cfg.cv.k, cfg.stage_seed("cv"), cfg.jobs)?;
        info!("cv: {arch} val acc {:.4} ± {:.4}", r.val_acc_mean, r.val_acc_std);
        results.push(r);
    }
    let dir = cfg.cv_dir();
    std::fs::create_dir_all(&dir)?;
    write_kfold_curves(&dir.join("kfold_curves.csv"), &results)?;
    let file = CvFile { k: cfg.cv.k, results };
    write_json(&dir.join("cv_results.json"), &with_config(cfg, &file)?)?;
    Ok(file.results)
}

pub fn checkpoint_path(cfg: &RunConfig, arch: Arch) -> PathBuf {
    cfg.model_dir().join(format!("{}.ckpt", arch.as_str()))
}

#[derive(Debug, Clone, Serialize)]
struct TrainingRecord<'a> {
    arch: Arch,
    params: HyperParams,
    checkpoint: String,
    state: &'a TrainState,
}

pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle(cfg)?;
    let mut paths = Vec::new();
    for &arch in &cfg.archs {
        let params = params_for(cfg, arch)?;
        let model = train_final(arch, &params, &bundle, &cfg.train, cfg.stage_seed("train"))?;
        let path = checkpoint_path(cfg, arch);
        std::fs::create_dir_all(cfg.model_dir())?;
        save_checkpoint(&model.net, model.state.best_epoch, with_config(cfg, &model.meta)?, &path)?;
        let record = TrainingRecord {
            arch,
            params,
            checkpoint: path.display().to_string(),
            state: &model.state,
        };
        write_json(
            &cfg.model_dir().join(format!("{}_training.json", arch.as_str())),
            &with_config(cfg, &record)?,
        )?;
        info!(
            "train: {arch} best epoch {} of {} ({:?})",
            model.state.best_epoch, model.state.epochs_run, model.state.stop_reason
        );
        paths.push(path);
    }
    Ok(paths)
}

pub fn evaluate(cfg: &RunConfig) -> Result<Vec<EvaluationReport>> {
    let bundle = load_bundle(cfg)?;
    let mut reports = Vec::new();
    for &arch in &cfg.archs {
        let dir = cfg.eval_dir(arch);
        let report = evaluate_final(&checkpoint_path(cfg, arch), &bundle, &dir)?;
        write_json(&dir.join("report.json"), &with_config(cfg, &report)?)?;
        info!(
            "evaluate: {arch} accuracy {:.4}, macro F1 {:.4}, macro AUC {:.4}",
            report.metrics.accuracy, report.metrics.f1, report.metrics.auc
        );
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub arch: Arch,
    pub test_images: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub most_confused: [String; 2],
    pub confusion_normalized: [[f64; 4]; 4],
}

impl ModelSummary {
    fn new(arch: Arch, test_images: usize, m: &MetricsReport) -> Self {
        let (a, b) = m.most_confused_pair();
        Self {
            arch,
            test_images,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: m.auc,
            most_confused: [CLASS_NAMES[a].to_string(), CLASS_NAMES[b].to_string()],
            confusion_normalized: m.confusion_normalized,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub models: Vec<ModelSummary>,
}

/// Collects every evaluated model into `output_dir/report.json` and prints
/// a table.
pub fn report(cfg: &RunConfig) -> Result<Summary> {
    let mut models = Vec::new();
    for &arch in &cfg.archs {
        let path = cfg.eval_dir(arch).join("report.json");
        if !path.is_file() {
            warn!("report: no evaluation for {arch} at {}", path.display());
            continue;
        }
        let r: EvaluationReport = read_json(&path)?;
        models.push(ModelSummary::new(arch, r.test_images, &r.metrics));
    }
    if models.is_empty() {
        return Err(CliError::Stage("no evaluation reports found; run `evaluate` first".into()));
    }
    println!("{:<18} {:>8} {:>8} {:>8} {:>8} {:>8}  most confused", "arch", "acc", "P", "Re", "F1", "AUC");
    for m in &models {
        println!(
            "{:<18} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {}<->{}",
            m.arch.as_str(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.auc,
            m.most_confused[0],
            m.most_confused[1]
        );
    }
    let summary = Summary { models };
    write_json(&cfg.output_dir.join("report.json"), &with_config(cfg, &summary)?)?;
    Ok(summary)
}

/// gen-phantoms, collect, split, search, cv, train, evaluate, then the summary.
pub fn all(cfg: &RunConfig) -> Result<Summary> {
    gen_phantoms(cfg)?;
    collect(cfg)?;
    split(cfg)?;
    search(cfg)?;
    cv(cfg)?;
    train(cfg)?;
    evaluate(cfg)?;
    report(cfg)
}
