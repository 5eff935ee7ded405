//! Final training on the full training split and held-out evaluation.

use std::fmt::Write as _;
use std::path::Path;

use agc_core::augment::ChannelStats;
use agc_core::collection::Split;
use agc_core::image::RgbImage;
use agc_nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use agc_nn::train::{evaluate, TrainState};
use agc_nn::{Arch, Network};
use serde::{Deserialize, Serialize};

use crate::data::{validation_split, DataBundle, TrainSettings};
use crate::hyper::HyperParams;
use crate::metrics::{compute_metrics, HeadlineMetrics, MetricsReport};
use crate::search::{fit_model, init_seed, run_seed};
use crate::{ExperimentError, Result, NUM_CLASSES};

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["I", "II", "III", "IV"];

/// Metadata stored in the checkpoint's `extra` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMeta {
    pub params: HyperParams,
    pub stats: ChannelStats,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

pub struct FinalModel {
    pub net: Network<f32>,
    pub state: TrainState,
    pub meta: FinalMeta,
}

impl FinalModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.net, self.state.best_epoch, serde_json::to_value(&self.meta)?, path)?;
        Ok(())
    }
}

/// Trains on the training tumors minus a validation hold-out that drives
/// early stopping.
pub fn train_final(arch: Arch, params: &HyperParams, bundle: &DataBundle, settings: &TrainSettings, seed: u64) -> Result<FinalModel> {
    settings.validate()?;
    let pool = bundle.tumors_by_class(&bundle.tumors_in(Split::Train));
    let (train, val) = validation_split(&pool, settings.val_fraction, seed)?;
    let (net, state, stats) = fit_model(arch, params, bundle, &train, &val, settings, init_seed(seed, arch), run_seed(seed, arch, "final", 0))?;
    let meta = FinalMeta {
        params: *params,
        stats,
        best_epoch: state.best_epoch,
        epochs_run: state.epochs_run,
    };
    Ok(FinalModel { net, state, meta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub arch: Arch,
    pub test_images: usize,
    pub test_tumors: usize,
    pub metrics: MetricsReport,
    /// Reference real-data numbers, kept for side-by-side reading only.
    pub reference: HeadlineMetrics,
    pub checkpoint: CheckpointHeader,
}

/// Scores the checkpoint on the test split (resize-only preprocessing) and
/// writes `report.json` plus a rendered confusion matrix.
pub fn evaluate_final(checkpoint: &Path, bundle: &DataBundle, out_dir: &Path) -> Result<EvaluationReport> {
    if !checkpoint.is_file() {
        return Err(ExperimentError::MissingCheckpoint(checkpoint.display().to_string()));
    }
    let (mut net, header) = load_checkpoint::<f32>(checkpoint)?;
    let meta: FinalMeta = serde_json::from_value(header.extra.clone())?;
    let [_, h, w] = net.input_shape();
    if [w, h] != bundle.target {
        return Err(ExperimentError::InvalidConfig(format!(
            "model expects {w}×{h} inputs, bundle holds {:?}",
            bundle.target
        )));
    }
    let test = bundle.tumors_in(Split::Test);
    let idx = bundle.indices_for(&test);
    if idx.is_empty() {
        return Err(ExperimentError::LengthMismatch("test split is empty".into()));
    }
    let ds = bundle.dataset(idx, meta.stats, None);
    let eval = evaluate(&mut net, &ds, 64)?;
    let metrics = compute_metrics(&eval.labels, &eval.predictions, &eval.probs)?;
    let report = EvaluationReport {
        arch: header.config.arch,
        test_images: eval.labels.len(),
        test_tumors: test.len(),
        metrics,
        reference: HeadlineMetrics::reference_dilated(),
        checkpoint: header,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    render_confusion(&report.metrics).save_ppm(&out_dir.join("confusion_matrix.ppm"))?;
    std::fs::write(out_dir.join("confusion_matrix.svg"), confusion_svg(&report.metrics, report.arch))?;
    Ok(report)
}

const CELL: usize = 48;

/// Row-normalised matrix as a white-to-blue heat map, one square per cell.
pub fn render_confusion(m: &MetricsReport) -> RgbImage {
    let side = CELL * NUM_CLASSES;
    RgbImage::from_fn(side, side, |x, y| {
        if x % CELL == 0 || y % CELL == 0 {
            return [96, 96, 96];
        }
        let v = m.confusion_normalized[y / CELL][x / CELL].clamp(0.0, 1.0);
        let shade = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
        [shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)]
    })
}

pub fn confusion_svg(m: &MetricsReport, arch: Arch) -> String {
    let cell = 80;
    let margin = 60;
    let side = margin + cell * NUM_CLASSES + 10;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{}" font-family="sans-serif">"#, side + 30);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{arch}</text>"#, side / 2);
    for (r, row) in m.confusion_normalized.iter().enumerate() {
        let y = margin + r * cell;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="13">{}</text>"#, margin - 8, y + cell / 2 + 5, CLASS_NAMES[r]);
        for (c, &v) in row.iter().enumerate() {
            let x = margin + c * cell;
            let blue = |lo: f64, hi: f64| (lo + (hi - lo) * v.clamp(0.0, 1.0)).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", blue(255.0, 8.0), blue(255.0, 48.0), blue(255.0, 107.0));
            let ink = if v > 0.5 { "white" } else { "black" };
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="gray"/>"#);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" font-size="13" fill="{ink}">{v:.2} ({})</text>"#,
                x + cell / 2,
                y + cell / 2 + 5,
                m.confusion[r][c]
            );
        }
    }
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{name}</text>"#, margin + c * cell + cell / 2, margin - 10);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">predicted</text>"#, margin + 2 * cell, side + 20);
    s.push_str("</svg>\n");
    s
}
