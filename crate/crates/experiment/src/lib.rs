//! Experiment harness: random hyperparameter search, tumor-level
//! cross-validation, final training and evaluation with macro metrics.

use thiserror::Error;

pub mod data;
pub mod hyper;
pub mod kfold;
pub mod metrics;
pub mod report;
pub mod search;

pub use data::{DataBundle, ImageDataset, TrainSettings};
pub use hyper::{sample_hyperparams, HyperParams};
pub use kfold::{run_cross_validation, stratified_kfold, CvResult};
pub use metrics::{compute_metrics, MetricsReport};
pub use report::{evaluate_final, train_final, FinalModel};
pub use search::{run_random_search, select_config, SearchConfig, SearchResult};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("label {label} is not one of the {classes} classes")]
    UnknownClassLabel { label: usize, classes: usize },
    #[error("class {class} has {count} tumors, need at least {need}")]
    InsufficientPhantoms { class: String, count: usize, need: usize },
    #[error("checkpoint not found at {0}")]
    MissingCheckpoint(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] agc_nn::NnError),
    #[error(transparent)]
    Collection(#[from] agc_core::collection::CollectionError),
    #[error(transparent)]
    Image(#[from] agc_core::image::ImageError),
    #[error(transparent)]
    Augment(#[from] agc_core::augment::AugmentError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

pub const NUM_CLASSES: usize = 4;
