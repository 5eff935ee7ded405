//! Force-limited view collection, dataset manifest, tumor-level split.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::image::{ImageError, RgbImage};
use crate::phantom::{BorrmannClass, PhantomSpec};
use crate::seed::{derive_seed, rng_from_seed, Rng, SeedPart};
use crate::tactile::{capture, contact_pose, SensorConfig, TactileError, TactileFrame, MAX_FORCE_N};

/// Train share of each class, as a fraction `8/11`.
const TRAIN_NUM: usize = 8;
const TRAIN_DEN: usize = 11;

#[derive(Debug, Error)]
pub enum CollectionError {
    #[error("phantom {phantom_id} view {view}: no contact after {retries} retries")]
    RetryExhausted {
        phantom_id: String,
        view: usize,
        retries: usize,
    },
    #[error("class {class} has {count} phantoms, need at least {need}")]
    InsufficientPhantoms {
        class: BorrmannClass,
        count: usize,
        need: usize,
    },
    #[error("invalid collection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tactile(#[from] TactileError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    pub views_per_phantom: usize,
    pub force_target: f64,
    pub tilt_max_deg: f64,
    pub master_seed: u64,
    /// `[width, height]` of every captured image.
    pub resolution: [usize; 2],
    /// The window center is drawn this far inside each phantom edge.
    pub center_margin_mm: f64,
    pub max_retries: usize,
    pub jobs: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            views_per_phantom: 50,
            force_target: 3.0,
            tilt_max_deg: 15.0,
            master_seed: 0,
            resolution: [256, 256],
            center_margin_mm: 7.5,
            max_retries: 20,
            jobs: 1,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<(), CollectionError> {
        let bad = |m: String| Err(CollectionError::InvalidConfig(m));
        if self.views_per_phantom == 0 {
            return bad("views_per_phantom must be at least 1".into());
        }
        if !(self.force_target > 0.0 && self.force_target <= MAX_FORCE_N) {
            return bad(format!("force_target {} outside (0, 3] N", self.force_target));
        }
        if !(0.0..=30.0).contains(&self.tilt_max_deg) {
            return bad(format!("tilt_max {}° outside [0, 30]", self.tilt_max_deg));
        }
        if !(0.0..15.0).contains(&self.center_margin_mm) {
            return bad(format!("center margin {} mm outside [0, 15)", self.center_margin_mm));
        }
        Ok(())
    }

    /// The sensor as used for this collection run.
    pub fn sensor(&self, base: &SensorConfig) -> SensorConfig {
        SensorConfig {
            resolution: self.resolution,
            force_target: self.force_target,
            ..base.clone()
        }
    }
}

/// Random face-on contact with the window center inside the phantom area.
pub fn sample_contact_pose(rng: &mut Rng, spec: &PhantomSpec, cfg: &CollectionConfig) -> RigidTransform {
    let m = cfg.center_margin_mm;
    let extent = spec.extent_mm;
    let cx = rng.random_range(m..=extent - m);
    let cy = rng.random_range(m..=extent - m);
    let spin = rng.random_range(0.0..2.0 * PI);
    let tilt_dir = rng.random_range(0.0..2.0 * PI);
    let tilt = rng.random_range(0.0..=1.0) * cfg.tilt_max_deg.to_radians();
    contact_pose([cx, cy], spin, tilt_dir, tilt)
}

/// Where the sensor axis crosses the phantom's base plane, in phantom mm.
pub fn window_center(pose: &RigidTransform) -> [f64; 2] {
    let inv = pose.inverse();
    let o = inv.translation;
    let d = inv.rotation.column(2);
    let s = -o.z / d.z;
    [o.x + s * d.x, o.y + s * d.y]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub image_path: String,
    pub phantom_id: String,
    pub borrmann_class: BorrmannClass,
    pub view: usize,
    pub seed: u64,
    pub pose: [f64; 16],
    pub achieved_force: f64,
    pub contact_fraction: f64,
    pub attempts: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub collection: CollectionConfig,
    pub sensor: SensorConfig,
    pub split_seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
}

pub fn view_seed(master_seed: u64, phantom_id: &str, view: usize) -> u64 {
    derive_seed(&[
        SeedPart::Int(master_seed),
        SeedPart::Str("view"),
        SeedPart::Str(phantom_id),
        SeedPart::Int(view as u64),
    ])
}

pub fn image_rel_path(phantom_id: &str, view: usize) -> String {
    format!("{phantom_id}/{view:03}.ppm")
}

/// One view, reproducible from `(master_seed, phantom_id, view)` alone.
/// Returns the frame with the attempt count that produced it.
pub fn capture_view(
    spec: &PhantomSpec,
    view: usize,
    cfg: &CollectionConfig,
    sensor: &SensorConfig,
) -> Result<(TactileFrame, u64, usize), CollectionError> {
    let seed = view_seed(cfg.master_seed, &spec.phantom_id, view);
    let mut rng = rng_from_seed(seed);
    for attempt in 0..=cfg.max_retries {
        let pose = sample_contact_pose(&mut rng, spec, cfg);
        match capture(spec, &pose, sensor) {
            Ok(frame) => return Ok((frame, seed, attempt + 1)),
            Err(TactileError::NoContact(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(CollectionError::RetryExhausted {
        phantom_id: spec.phantom_id.clone(),
        view,
        retries: cfg.max_retries,
    })
}

fn collect_phantom(
    spec: &PhantomSpec,
    cfg: &CollectionConfig,
    sensor: &SensorConfig,
    dir: &Path,
) -> Result<Vec<ManifestEntry>, CollectionError> {
    std::fs::create_dir_all(dir.join(&spec.phantom_id))?;
    (0..cfg.views_per_phantom)
        .map(|view| {
            let (frame, seed, attempts) = capture_view(spec, view, cfg, sensor)?;
            let rel = image_rel_path(&spec.phantom_id, view);
            frame.image.save_ppm(&dir.join(&rel))?;
            Ok(ManifestEntry {
                image_path: rel,
                phantom_id: spec.phantom_id.clone(),
                borrmann_class: spec.borrmann_class,
                view,
                seed,
                pose: frame.pose_used.to_row_major(),
                achieved_force: frame.achieved_force,
                contact_fraction: frame.contact_fraction,
                attempts,
                split: Split::Unassigned,
            })
        })
        .collect()
}

/// Capture every view of every phantom, writing images under `dir`.
///
/// Phantoms are processed on up to `cfg.jobs` threads; the manifest order is
/// always bank order then view order.
pub fn collect_dataset(
    bank: &[PhantomSpec],
    cfg: &CollectionConfig,
    sensor_base: &SensorConfig,
    dir: &Path,
) -> Result<DatasetManifest, CollectionError> {
    cfg.validate()?;
    let sensor = cfg.sensor(sensor_base);
    sensor.validate()?;
    std::fs::create_dir_all(dir)?;
    let jobs = cfg.jobs.clamp(1, bank.len().max(1));
    let mut per_phantom: Vec<Option<Result<Vec<ManifestEntry>, CollectionError>>> =
        (0..bank.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = bank.len().div_ceil(jobs).max(1);
        for (specs, slots) in bank.chunks(chunk).zip(per_phantom.chunks_mut(chunk)) {
            let sensor = &sensor;
            scope.spawn(move || {
                for (spec, slot) in specs.iter().zip(slots) {
                    *slot = Some(collect_phantom(spec, cfg, sensor, dir));
                }
            });
        }
    });
    let mut entries = Vec::with_capacity(bank.len() * cfg.views_per_phantom);
    for r in per_phantom {
        entries.extend(r.expect("every phantom slot is filled")?);
    }
    Ok(DatasetManifest {
        collection: cfg.clone(),
        sensor,
        split_seed: None,
        entries,
    })
}

fn train_count(n: usize) -> usize {
    (n * TRAIN_NUM).div_ceil(TRAIN_DEN).min(n - 1)
}

/// Tumor-level split, 8:3 per class (rounded toward train, at least one test).
pub fn split_train_test(manifest: &DatasetManifest, split_seed: u64) -> Result<DatasetManifest, CollectionError> {
    let by_class = manifest.phantoms_by_class();
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for class in BorrmannClass::ALL {
        let ids = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if ids.len() < 2 {
            return Err(CollectionError::InsufficientPhantoms {
                class,
                count: ids.len(),
                need: 2,
            });
        }
        let mut shuffled = ids.to_vec();
        let mut rng = rng_from_seed(derive_seed(&[
            SeedPart::Int(split_seed),
            SeedPart::Str("split"),
            SeedPart::Str(class.name()),
        ]));
        shuffled.shuffle(&mut rng);
        let n_train = train_count(shuffled.len());
        for (i, id) in shuffled.into_iter().enumerate() {
            assignment.insert(id, if i < n_train { Split::Train } else { Split::Test });
        }
    }
    let mut out = manifest.clone();
    out.split_seed = Some(split_seed);
    for e in &mut out.entries {
        e.split = assignment[e.phantom_id.as_str()];
    }
    Ok(out)
}

impl DatasetManifest {
    /// Phantom ids per class in first-appearance order.
    pub fn phantoms_by_class(&self) -> BTreeMap<BorrmannClass, Vec<&str>> {
        let mut seen = BTreeSet::new();
        let mut out: BTreeMap<BorrmannClass, Vec<&str>> = BTreeMap::new();
        for e in &self.entries {
            if seen.insert(e.phantom_id.as_str()) {
                out.entry(e.borrmann_class).or_default().push(&e.phantom_id);
            }
        }
        out
    }

    pub fn phantom_ids(&self, split: Split) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.phantom_id.as_str())
            .collect()
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn class_counts(&self, split: Option<Split>) -> [usize; 4] {
        let mut c = [0; 4];
        for e in &self.entries {
            if split.is_none_or(|s| e.split == s) {
                c[e.borrmann_class.index()] += 1;
            }
        }
        c
    }

    /// Entries whose force is above the hard cap or below the settle band.
    pub fn force_violations(&self) -> Vec<&ManifestEntry> {
        let floor = self.sensor.force_band * self.collection.force_target;
        self.entries
            .iter()
            .filter(|e| e.achieved_force > MAX_FORCE_N || e.achieved_force < floor * (1.0 - 1e-12))
            .collect()
    }

    /// Every image exists and has the configured resolution.
    pub fn verify_images(&self, dir: &Path) -> Result<(), CollectionError> {
        let [w, h] = self.collection.resolution;
        for e in &self.entries {
            let img = RgbImage::load_ppm(&dir.join(&e.image_path))?;
            if img.width != w || img.height != h {
                return Err(CollectionError::InvalidConfig(format!(
                    "{} is {}×{}, expected {w}×{h}",
                    e.image_path, img.width, img.height
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, CollectionError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CollectionError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CollectionError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn image_path(&self, dir: &Path, entry: &ManifestEntry) -> PathBuf {
        dir.join(&entry.image_path)
    }
}
