//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any gating criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use agc_cli::{stages, RunConfig};
use agc_core::collection::{DatasetManifest, Split};
use agc_core::phantom::BorrmannClass;
use agc_core::workcell::{run_calibration, WorkcellConfig};
use agc_experiment::metrics::compute_metrics;
use agc_experiment::report::CLASS_NAMES;
use agc_experiment::HyperParams;
use agc_nn::gradcheck::{check_layer, check_network, GradReport};
use agc_nn::layers::{BatchNorm2d, Conv2d, ConvSpec, GlobalAvgPool, Layer, Linear, MaxPool2d, Relu, ResidualBlock};
use agc_nn::optim::{Optimizer, OptimizerKind, OptimizerSpec};
use agc_nn::schedule::{ScheduleKind, ScheduleSpec};
use agc_nn::train::{train, train_step, MemoryDataset, StopReason, TrainConfig};
use agc_nn::{build_model, Arch, ModelConfig, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Some(true)` pass, `Some(false)` fail, `None` report-only.
struct Outcome {
    verdict: Option<bool>,
    detail: String,
}

fn pass(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: Some(ok),
        detail,
    }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> Option<bool> {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        pass(false, format!("panicked: {msg}"))
    });
    let tag = match out.verdict {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "REPORT",
    };
    println!("criterion {id:>2} [{tag}] {name}: {} ({:.1}s)", out.detail, t.elapsed().as_secs_f64());
    out.verdict
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn values(n: usize, seed: u64) -> Vec<f64> {
    tensor(&[n], seed).data
}

fn config_in(dir: &Path) -> RunConfig {
    RunConfig {
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
    .resolve(&Default::default())
    .unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_1(m: &DatasetManifest, secs: f64) -> Outcome {
    let phantoms: BTreeSet<&str> = m.entries.iter().map(|e| e.phantom_id.as_str()).collect();
    let per_class = m.class_counts(None);
    let train = m.phantom_ids(Split::Train);
    let test = m.phantom_ids(Split::Test);
    let n_train = m.entries_in(Split::Train).count();
    let n_test = m.entries_in(Split::Test).count();
    let ok = phantoms.len() == 44
        && m.entries.len() == 2200
        && per_class == [550; 4]
        && n_train == 1600
        && n_test == 600
        && train.len() == 32
        && test.len() == 12
        && train.is_disjoint(&test)
        && secs < 300.0;
    pass(
        ok,
        format!(
            "{} phantoms, {} images, per class {per_class:?}, train {n_train}/{} tumors, test {n_test}/{} tumors, disjoint {}, {secs:.1}s",
            phantoms.len(),
            m.entries.len(),
            train.len(),
            test.len(),
            train.is_disjoint(&test)
        ),
    )
}

fn criterion_2(m: &DatasetManifest) -> Outcome {
    let target = m.collection.force_target;
    let over = m.entries.iter().filter(|e| e.achieved_force > 3.0).count();
    let under = m.entries.iter().filter(|e| e.achieved_force < 0.98 * target).count();
    let (lo, hi) = m
        .entries
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(e.achieved_force), hi.max(e.achieved_force)));
    pass(
        over == 0 && under == 0,
        format!("{over} above 3.0 N, {under} below {:.3} N, range [{lo:.4}, {hi:.4}] N", 0.98 * target),
    )
}

fn criterion_3() -> Outcome {
    let clean = run_calibration(
        &WorkcellConfig {
            poses: 10,
            noise_px: 0.0,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let clean_rot = clean.t_bt_error.rot_rad.max(clean.t_rc_error.rot_rad);
    let clean_trans = clean.t_bt_error.trans_mm.max(clean.t_rc_error.trans_mm);
    let (mut rot, mut trans) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let r = run_calibration(
            &WorkcellConfig {
                poses: 10,
                noise_px: 0.5,
                ..Default::default()
            },
            seed,
        )
        .unwrap();
        rot = rot.max(r.t_bt_error.rot_rad).max(r.t_rc_error.rot_rad);
        trans = trans.max(r.t_bt_error.trans_mm).max(r.t_rc_error.trans_mm);
    }
    pass(
        clean_rot < 1e-6 && clean_trans < 1e-5 && rot < 0.02 && trans < 1.0,
        format!("noise-free {clean_rot:.2e} rad / {clean_trans:.2e} mm; 0.5 px worst of 20 seeds {rot:.2e} rad / {trans:.2e} mm"),
    )
}

fn criterion_4() -> Outcome {
    let r = run_calibration(
        &WorkcellConfig {
            poses: 5,
            noise_px: 0.0,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let worst = r.intrinsics_rel_err.iter().cloned().fold(0.0, f64::max);
    pass(worst < 1e-4, format!("worst relative error over fx, fy, cx, cy {worst:.2e}"))
}

fn jitter_offsets(net: &mut Network<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in net.params_mut() {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    let mut skipped = 0.0f64;
    let mut note = |name: &str, rep: GradReport| {
        worst = worst.max(rep.max_rel_err);
        skipped = skipped.max(rep.skip_fraction());
        assert!(rep.skip_fraction() < 0.05, "{name}: too many kink probes {rep:?}");
    };
    for seed in 0..5u64 {
        let x = tensor(&[3, 2, 6, 6], 100 + seed);
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value = values(2, seed + 50);
        bn.beta.value = values(2, seed + 60);
        let mut layers: Vec<Box<dyn Layer<f64>>> = vec![
            Box::new(Conv2d::new("conv", ConvSpec::k3(2, 3, 1, 2).with_bias(), values(54, seed))),
            Box::new(bn),
            Box::new(Relu::new("relu")),
            Box::new(MaxPool2d::new("pool", 2, 2)),
            Box::new(GlobalAvgPool::new("gap")),
            Box::new(ResidualBlock::new(
                "block",
                Conv2d::new("c1", ConvSpec::k3(2, 3, 2, 1), values(54, seed + 2)),
                Conv2d::new("c2", ConvSpec::k3(3, 3, 1, 1), values(81, seed + 3)),
                Some(Conv2d::new("p", ConvSpec::k1(2, 3, 2), values(6, seed + 4))),
            )),
            Box::new(ResidualBlock::new(
                "identity",
                Conv2d::new("c1", ConvSpec::k3(2, 2, 1, 2), values(36, seed + 5)),
                Conv2d::new("c2", ConvSpec::k3(2, 2, 1, 2), values(36, seed + 6)),
                None,
            )),
        ];
        for layer in &mut layers {
            let rep = check_layer(layer.as_mut(), &x, true, usize::MAX, seed).unwrap();
            note(layer.name(), rep);
        }
        let mut fc = Linear::new("fc", 5, 3, values(15, seed));
        fc.bias.value = values(3, seed + 1);
        note("fc", check_layer(&mut fc, &tensor(&[4, 5], seed), true, usize::MAX, seed).unwrap());

        let mut net = build_model::<f64>(&ModelConfig::dilated_resnet(16), seed).unwrap();
        jitter_offsets(&mut net, seed);
        note("model", check_network(&mut net, &tensor(&[4, 3, 16, 16], 200 + seed), &[3, 2, 1, 0], 6).unwrap());
    }
    pass(
        worst < 1e-5,
        format!("max relative error {worst:.2e} over 8 layer kinds and the desk dilated model, seeds 0-4 (kink skips <= {:.1}%)", 100.0 * skipped),
    )
}

fn trapezoid_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
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

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut auc_gap = 0.0f64;
    let mut exact = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..4) }).collect();
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(0..6) as f64 / 5.0).collect()).collect();
        let m = compute_metrics(&truth, &pred, &scores).unwrap();
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for c in 0..4 {
            let count = |want_t: bool, want_p: bool| {
                truth.iter().zip(&pred).filter(|(t, q)| (**t == c) == want_t && (**q == c) == want_p).count()
            };
            let (tp, fp, fne) = (count(true, true), count(false, true), count(true, false));
            let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            p += div(tp, tp + fp);
            r += div(tp, tp + fne);
            f += div(2 * tp, 2 * tp + fp + fne);
        }
        let acc = truth.iter().zip(&pred).filter(|(t, q)| t == q).count() as f64 / n as f64;
        exact &= (m.accuracy, m.precision, m.recall, m.f1) == (acc, p / 4.0, r / 4.0, f / 4.0);
        for c in 0..4 {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            match (trapezoid_auc(&col, &pos), m.per_class_auc[c]) {
                (Some(a), Some(b)) => auc_gap = auc_gap.max((a - b).abs()),
                (None, None) => {}
                _ => exact = false,
            }
        }
    }
    pass(
        exact && auc_gap < 1e-12,
        format!("100 cases: P/R/F1/accuracy exact {exact}, max AUC deviation {auc_gap:.1e}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::<f32>::from_fn(&[8, 3, 32, 32], |_| rng.random_range(-1.0f32..1.0));
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let mut steps = Vec::new();
    for arch in Arch::ALL {
        let mut net = build_model::<f32>(&ModelConfig::for_arch(arch, 32), 0).unwrap();
        let mut opt = Optimizer::new(OptimizerSpec::new(OptimizerKind::Adam, 0.01, 0.0));
        let reached = (0..200).find(|_| train_step(&mut net, &mut opt, &x, &labels, 0.01).unwrap().1 == 8);
        steps.push((arch, reached.map(|s| s + 1)));
    }
    let constant = MemoryDataset {
        samples: vec![vec![0.5; 3 * 16 * 16]; 8],
        labels: labels.to_vec(),
    };
    let mut frozen = build_model::<f32>(&ModelConfig::alexnet_baseline(16).narrow(4), 0).unwrap();
    let state = train(
        &mut frozen,
        &constant,
        &constant,
        &OptimizerSpec::new(OptimizerKind::Sgd, 0.0, 0.0),
        &ScheduleSpec::new(ScheduleKind::Cosine),
        &TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let fit = steps.iter().all(|(_, s)| s.is_some());
    let stopped = state.epochs_run == 11 && state.stop_reason == StopReason::EarlyStop;
    let desc: Vec<String> = steps
        .iter()
        .map(|(a, s)| format!("{a} {}", s.map_or("never".into(), |s| format!("{s} steps"))))
        .collect();
    pass(
        fit && stopped,
        format!("memorised: {}; lr=0 run stopped after {} epochs ({:?})", desc.join(", "), state.epochs_run, state.stop_reason),
    )
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config_in(&tmp.path().join("run"));
    cfg.collection.views_per_phantom = 4;
    cfg.search.n_configs = 2;
    cfg.train.max_epochs = 2;
    cfg.archs = vec![Arch::AlexnetBaseline, Arch::DilatedResnet];
    let cfg = cfg.resolve(&Default::default()).unwrap();
    let once = |cfg: &RunConfig| {
        let _ = std::fs::remove_dir_all(&cfg.output_dir);
        stages::gen_phantoms(cfg).unwrap();
        stages::collect(cfg).unwrap();
        stages::split(cfg).unwrap();
        stages::search(cfg).unwrap();
        stages::train(cfg).unwrap();
        let s = snapshot(&cfg.output_dir);
        let keep = |k: &String| {
            k.ends_with("manifest.json")
                || k.ends_with("manifest_split.json")
                || k.ends_with(".csv")
                || k.ends_with(".ckpt")
                || k.ends_with(".phantom")
                || k.ends_with(".ppm")
        };
        s.into_iter().filter(|(k, _)| keep(k)).collect::<BTreeMap<_, _>>()
    };
    let a = once(&cfg);
    let b = once(&cfg);
    let mut par = cfg.clone();
    par.jobs = 3;
    let par = par.resolve(&Default::default()).unwrap();
    let _ = std::fs::remove_dir_all(&par.output_dir);
    stages::gen_phantoms(&par).unwrap();
    let m_par = stages::collect(&par).unwrap();
    let m_seq = DatasetManifest::load(&tmp.path().join("run/dataset/manifest.json")).unwrap();
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    pass(
        a == b && m_par.entries == m_seq.entries,
        format!(
            "{} artifacts compared (manifests, results table, checkpoints, images), {} differ; 3-job collection matches 1-job: {}",
            a.len(),
            differing.len(),
            m_par.entries == m_seq.entries
        ),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut gating = Vec::new();
    gating.push(run(3, "hand-eye calibration", criterion_3));
    gating.push(run(4, "camera intrinsics", criterion_4));
    gating.push(run(5, "gradient checks", criterion_5));
    gating.push(run(6, "metric oracles", criterion_6));
    gating.push(run(7, "training sanity", criterion_7));
    gating.push(run(10, "determinism", criterion_10));

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("desk");
    let t = Instant::now();
    let cfg = config_in(&dir);
    let built = catch_unwind(AssertUnwindSafe(|| {
        stages::gen_phantoms(&cfg).unwrap();
        stages::collect(&cfg).unwrap();
        stages::split(&cfg).unwrap()
    }));
    let secs = t.elapsed().as_secs_f64();
    match &built {
        Ok(m) => {
            gating.push(run(1, "dataset protocol", || criterion_1(m, secs)));
            gating.push(run(2, "force invariant", || criterion_2(m)));
        }
        Err(_) => {
            gating.push(run(1, "dataset protocol", || pass(false, "pipeline failed".into())));
            gating.push(run(2, "force invariant", || pass(false, "pipeline failed".into())));
        }
    }

    let mut confusion = None;
    gating.push(run(8, "learning signal", || {
        let mut c = cfg.clone();
        c.archs = vec![Arch::DilatedResnet];
        c.hyperparams = Some(HyperParams::reference_dilated());
        c.train.time_budget_secs = Some(900.0);
        let c = c.resolve(&Default::default()).unwrap();
        let t = Instant::now();
        stages::train(&c).unwrap();
        let train_secs = t.elapsed().as_secs_f64();
        let report = stages::evaluate(&c).unwrap().remove(0);
        let acc = report.metrics.accuracy;
        confusion = Some(report.metrics.clone());
        pass(
            acc >= 0.70 && train_secs <= 960.0,
            format!(
                "dilated_resnet test accuracy {acc:.4} on {} images, macro F1 {:.4}, macro AUC {:.4}, training {train_secs:.0}s",
                report.test_images, report.metrics.f1, report.metrics.auc
            ),
        )
    }));

    run(9, "most confused pair (report only)", || {
        let Some(m) = &confusion else {
            return Outcome {
                verdict: None,
                detail: "no evaluation available".into(),
            };
        };
        let (a, b) = m.most_confused_pair();
        let names = [BorrmannClass::ALL[a].name(), BorrmannClass::ALL[b].name()];
        Outcome {
            verdict: None,
            detail: format!(
                "1 seed evaluated: most confused {}<->{} (II<->III: {}); raw confusion {:?}",
                names[0],
                names[1],
                names == [CLASS_NAMES[1], CLASS_NAMES[2]],
                m.confusion
            ),
        }
    });

    let failed = gating.iter().filter(|v| **v == Some(false)).count();
    println!("acceptance: {} gating criteria, {failed} failed", gating.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
