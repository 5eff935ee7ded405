//! The resolved run configuration shared by every stage.

use std::path::{Path, PathBuf};

use agc_core::collection::CollectionConfig;
use agc_core::phantom::{DEFAULT_GRID, PHANTOMS_PER_CLASS};
use agc_core::seed::sub_seed;
use agc_core::tactile::SensorConfig;
use agc_core::workcell::WorkcellConfig;
use agc_experiment::{HyperParams, SearchConfig, TrainSettings};
use agc_nn::Arch;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomBankConfig {
    pub per_class: usize,
    pub grid: usize,
}

impl Default for PhantomBankConfig {
    fn default() -> Self {
        Self {
            per_class: PHANTOMS_PER_CLASS,
            grid: DEFAULT_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// Desk-scale defaults: 64×64 captures and classifier inputs.
pub const DESK_RESOLUTION: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub jobs: usize,
    pub phantoms: PhantomBankConfig,
    pub sensor: SensorConfig,
    pub collection: CollectionConfig,
    pub calibration: WorkcellConfig,
    pub train: TrainSettings,
    pub search: SearchConfig,
    pub cv: CvConfig,
    pub archs: Vec<Arch>,
    /// Pins the hyperparameters of cv/train and skips reading search results.
    pub hyperparams: Option<HyperParams>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut collection = CollectionConfig::default();
        collection.resolution = [DESK_RESOLUTION; 2];
        let mut train = TrainSettings::default();
        train.augment.target_size = [DESK_RESOLUTION; 2];
        Self {
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            jobs: 1,
            phantoms: PhantomBankConfig::default(),
            sensor: SensorConfig::default(),
            collection,
            calibration: WorkcellConfig::default(),
            train,
            search: SearchConfig::default(),
            cv: CvConfig::default(),
            archs: Arch::ALL.to_vec(),
            hyperparams: None,
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub n_configs: Option<usize>,
    pub resolution: Option<usize>,
    pub views: Option<usize>,
    pub archs: Option<Vec<Arch>>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies flag overrides, then pushes the shared knobs (seed, jobs)
    /// down into the sub-records so the resolved file is self-contained.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.master_seed = s;
        }
        if let Some(p) = &o.out {
            self.output_dir = p.clone();
        }
        if let Some(n) = o.n_configs {
            self.search.n_configs = n;
        }
        if let Some(r) = o.resolution {
            self.collection.resolution = [r, r];
            self.train.augment.target_size = [r, r];
        }
        if let Some(v) = o.views {
            self.collection.views_per_phantom = v;
        }
        if let Some(a) = &o.archs {
            self.archs = a.clone();
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        self.collection.master_seed = self.master_seed;
        self.collection.jobs = self.jobs;
        self.search.jobs = self.jobs;
        self.search.seed = self.stage_seed("search");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::InvalidConfig(m));
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.phantoms.per_class < 2 || self.phantoms.grid < 8 {
            return bad("phantom bank needs per_class >= 2 and grid >= 8".into());
        }
        if self.search.n_configs == 0 {
            return bad("search.n_configs must be at least 1".into());
        }
        if self.cv.k < 2 {
            return bad("cv.k must be at least 2".into());
        }
        if self.archs.is_empty() {
            return bad("at least one architecture is required".into());
        }
        if let Some(p) = &self.hyperparams {
            if !p.in_bounds() {
                return bad(format!("pinned hyperparameters out of bounds: {p:?}"));
            }
        }
        self.sensor.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        self.collection.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        self.calibration.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Seed of one pipeline stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        sub_seed(self.master_seed, stage)
    }

    pub fn phantom_dir(&self) -> PathBuf {
        self.output_dir.join("phantoms")
    }
    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset")
    }
    pub fn search_dir(&self) -> PathBuf {
        self.output_dir.join("search")
    }
    pub fn cv_dir(&self) -> PathBuf {
        self.output_dir.join("cv")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join("models")
    }
    pub fn eval_dir(&self, arch: Arch) -> PathBuf {
        self.output_dir.join("eval").join(arch.as_str())
    }
}
