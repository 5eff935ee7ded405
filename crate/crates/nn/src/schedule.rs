//! Per-epoch learning-rate schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::NnError;

/// Smallest decrease in a monitored loss that counts as an improvement.
pub const IMPROVEMENT_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Step,
    Plateau,
    Onecycle,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Step,
        ScheduleKind::Plateau,
        ScheduleKind::Onecycle,
        ScheduleKind::Cosine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Step => "step",
            ScheduleKind::Plateau => "plateau",
            ScheduleKind::Onecycle => "onecycle",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| NnError::InvalidConfig(format!("unknown scheduler {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub step_size: usize,
    pub gamma: f64,
    pub factor: f64,
    pub patience: usize,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
    pub t_max: usize,
    pub eta_min: f64,
    /// Length of the one-cycle schedule in epochs.
    pub total_epochs: usize,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            step_size: 10,
            gamma: 0.5,
            factor: 0.1,
            patience: 5,
            pct_start: 0.3,
            div: 25.0,
            final_div: 1e4,
            t_max: 50,
            eta_min: 0.0,
            total_epochs: 50,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.gamma) || !unit(self.factor) {
            return Err(NnError::InvalidConfig("gamma and factor must lie in (0, 1]".into()));
        }
        if self.patience == 0 || self.t_max == 0 || self.step_size == 0 || self.total_epochs == 0 {
            return Err(NnError::InvalidConfig(
                "patience, t_max, step_size and total_epochs must be at least 1".into(),
            ));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) || self.div < 1.0 || self.final_div < 1.0 {
            return Err(NnError::InvalidConfig("one-cycle shape parameters out of range".into()));
        }
        if self.eta_min < 0.0 {
            return Err(NnError::InvalidConfig("eta_min must be non-negative".into()));
        }
        Ok(())
    }
}

/// Closed-form rate for the stateless schedules (plateau returns `base`).
pub fn scheduled_lr(spec: &ScheduleSpec, base: f64, epoch: usize) -> f64 {
    let e = epoch as f64;
    match spec.kind {
        ScheduleKind::Step => base * spec.gamma.powi((epoch / spec.step_size) as i32),
        ScheduleKind::Cosine => {
            spec.eta_min + 0.5 * (base - spec.eta_min) * (1.0 + (PI * e / spec.t_max as f64).cos())
        }
        ScheduleKind::Onecycle => {
            let total = spec.total_epochs as f64;
            let warm = spec.pct_start * total;
            let start = base / spec.div;
            if e < warm {
                start + (base - start) * e / warm
            } else {
                let end = base / spec.final_div;
                let p = ((e - warm) / (total - warm).max(1e-12)).clamp(0.0, 1.0);
                end + (base - end) * 0.5 * (1.0 + (PI * p).cos())
            }
        }
        ScheduleKind::Plateau => base,
    }
}

/// Wraps a spec with the state reduce-on-plateau needs.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub spec: ScheduleSpec,
    pub base_lr: f64,
    current: f64,
    best: f64,
    bad_epochs: usize,
}

impl Scheduler {
    pub fn new(spec: ScheduleSpec, base_lr: f64) -> Self {
        Self {
            spec,
            base_lr,
            current: base_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        match self.spec.kind {
            ScheduleKind::Plateau => self.current,
            _ => scheduled_lr(&self.spec, self.base_lr, epoch),
        }
    }

    /// Feed the epoch's validation loss.
    pub fn end_epoch(&mut self, val_loss: Option<f64>) -> Result<(), NnError> {
        if self.spec.kind != ScheduleKind::Plateau {
            return Ok(());
        }
        let loss = val_loss.ok_or(NnError::MissingValLoss)?;
        if loss < self.best - IMPROVEMENT_DELTA {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.spec.patience {
                self.current *= self.spec.factor;
                self.bad_epochs = 0;
            }
        }
        Ok(())
    }
}
