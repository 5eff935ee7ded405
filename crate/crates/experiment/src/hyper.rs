//! The random-search space.

use agc_nn::optim::{OptimizerKind, OptimizerSpec};
use agc_nn::schedule::{ScheduleKind, ScheduleSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LR_RANGE: [f64; 2] = [0.001, 0.1];
pub const WEIGHT_DECAY_RANGE: [f64; 2] = [0.0, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub scheduler: ScheduleKind,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
}

impl HyperParams {
    /// Best configuration reported for the dilated model on real sensor data.
    pub fn reference_dilated() -> Self {
        Self {
            lr: 0.06308,
            scheduler: ScheduleKind::Cosine,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.00338,
        }
    }

    pub fn in_bounds(&self) -> bool {
        (LR_RANGE[0]..=LR_RANGE[1]).contains(&self.lr)
            && (WEIGHT_DECAY_RANGE[0]..=WEIGHT_DECAY_RANGE[1]).contains(&self.weight_decay)
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec {
        OptimizerSpec::new(self.optimizer, self.lr, self.weight_decay)
    }

    /// Schedule spec whose one-cycle length matches the epoch cap.
    pub fn schedule_spec(&self, max_epochs: usize) -> ScheduleSpec {
        ScheduleSpec {
            total_epochs: max_epochs.max(1),
            ..ScheduleSpec::new(self.scheduler)
        }
    }
}

/// lr log-uniform, weight decay uniform, categorical choices uniform.
pub fn sample_hyperparams<R: Rng + ?Sized>(rng: &mut R) -> HyperParams {
    let lr = rng.random_range(LR_RANGE[0].ln()..=LR_RANGE[1].ln()).exp();
    let scheduler = ScheduleKind::ALL[rng.random_range(0..ScheduleKind::ALL.len())];
    let optimizer = OptimizerKind::ALL[rng.random_range(0..OptimizerKind::ALL.len())];
    let weight_decay = rng.random_range(WEIGHT_DECAY_RANGE[0]..=WEIGHT_DECAY_RANGE[1]);
    HyperParams {
        lr: lr.clamp(LR_RANGE[0], LR_RANGE[1]),
        scheduler,
        optimizer,
        weight_decay,
    }
}
