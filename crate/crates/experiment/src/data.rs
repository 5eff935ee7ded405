//! Bridges collected datasets to the training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use agc_core::augment::{augment, augment_seed, resize, AugmentConfig, ChannelStats};
use agc_core::collection::{DatasetManifest, Split};
use agc_core::image::RgbImage;
use agc_core::phantom::BorrmannClass;
use agc_core::seed::{derive_seed, rng_from_seed, SeedPart};
use agc_nn::train::{Dataset, TrainConfig};
use agc_nn::NnError;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{ExperimentError, Result};

/// Training-loop knobs shared by search, cross-validation and final fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub time_budget_secs: Option<f64>,
    /// Share of each class's training tumors held out for validation.
    pub val_fraction: f64,
    pub augment: AugmentConfig,
    pub augment_train: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 10,
            batch_size: 32,
            time_budget_secs: None,
            val_fraction: 0.2,
            augment: AugmentConfig::default(),
            augment_train: true,
        }
    }
}

impl TrainSettings {
    pub fn input_size(&self) -> usize {
        self.augment.target_size[0]
    }

    pub fn train_config(&self, run_seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: 1e-6,
            batch_size: self.batch_size,
            run_seed,
            time_budget_secs: self.time_budget_secs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.augment.target_size[0] != self.augment.target_size[1] {
            return Err(ExperimentError::InvalidConfig("classifier input must be square".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ExperimentError::InvalidConfig("val_fraction must lie in (0, 1)".into()));
        }
        self.train_config(0).validate()?;
        Ok(())
    }
}

/// A manifest with its images decoded and resized to the classifier input.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
    pub target: [usize; 2],
}

impl DataBundle {
    pub fn load(manifest: DatasetManifest, dir: &Path, target: [usize; 2]) -> Result<Self> {
        let images = manifest
            .entries
            .iter()
            .map(|e| {
                let img = RgbImage::load_ppm(&manifest.image_path(dir, e))?;
                Ok(resize(&img, target[0], target[1])?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images, target })
    }

    /// Entry indices belonging to the given tumors, in manifest order.
    pub fn indices_for(&self, tumors: &BTreeSet<String>) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| tumors.contains(&e.phantom_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn tumors_in(&self, split: Split) -> BTreeSet<String> {
        self.manifest.phantom_ids(split).into_iter().map(String::from).collect()
    }

    /// Tumor ids per class, restricted to `tumors`, in manifest order.
    pub fn tumors_by_class(&self, tumors: &BTreeSet<String>) -> BTreeMap<BorrmannClass, Vec<String>> {
        self.manifest
            .phantoms_by_class()
            .into_iter()
            .map(|(c, ids)| {
                (c, ids.into_iter().filter(|id| tumors.contains(*id)).map(String::from).collect())
            })
            .collect()
    }

    pub fn channel_stats(&self, indices: &[usize]) -> ChannelStats {
        ChannelStats::from_images(indices.iter().map(|&i| &self.images[i]))
    }

    pub fn dataset(&self, indices: Vec<usize>, stats: ChannelStats, augmentation: Option<(AugmentConfig, u64)>) -> ImageDataset<'_> {
        ImageDataset {
            bundle: self,
            indices,
            stats,
            augmentation,
        }
    }
}

/// A subset of a bundle, optionally augmented on training draws.
pub struct ImageDataset<'a> {
    bundle: &'a DataBundle,
    pub indices: Vec<usize>,
    pub stats: ChannelStats,
    /// Pipeline settings and the run seed its streams derive from.
    pub augmentation: Option<(AugmentConfig, u64)>,
}

impl Dataset for ImageDataset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, index: usize) -> usize {
        self.bundle.manifest.entries[self.indices[index]].borrmann_class.index()
    }

    fn sample(&self, index: usize, epoch: Option<usize>) -> std::result::Result<Vec<f32>, NnError> {
        let img = &self.bundle.images[self.indices[index]];
        Ok(match (&self.augmentation, epoch) {
            (Some((cfg, seed)), Some(epoch)) => {
                let mut rng = rng_from_seed(augment_seed(*seed, epoch, self.indices[index]));
                self.stats.standardize(&augment(img, cfg, &mut rng))
            }
            _ => self.stats.standardize(img),
        })
    }
}

/// Holds out `fraction` of each class's tumors (at least one, never all).
pub fn validation_split(
    by_class: &BTreeMap<BorrmannClass, Vec<String>>,
    fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let (mut train, mut val) = (BTreeSet::new(), BTreeSet::new());
    for class in BorrmannClass::ALL {
        let ids = by_class.get(&class).cloned().unwrap_or_default();
        if ids.len() < 2 {
            return Err(ExperimentError::InsufficientPhantoms {
                class: class.name().into(),
                count: ids.len(),
                need: 2,
            });
        }
        let mut ids = ids;
        ids.shuffle(&mut rng_from_seed(derive_seed(&[
            SeedPart::Int(seed),
            SeedPart::Str("validation"),
            SeedPart::Str(class.name()),
        ])));
        let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
        for (i, id) in ids.into_iter().enumerate() {
            if i < n_val {
                val.insert(id);
            } else {
                train.insert(id);
            }
        }
    }
    Ok((train, val))
}
