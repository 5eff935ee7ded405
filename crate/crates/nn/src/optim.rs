//! SGD with momentum, Adam and AdaBound.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::layers::Param;
use crate::scalar::Scalar;
use crate::tensor::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adabound,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::Adabound];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adabound => "adabound",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| NnError::InvalidConfig(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub final_lr: f64,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr: 0.1,
        }
    }

    /// `lr = 0` is accepted so that frozen-weight fixtures can run.
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.lr) {
            return bad(format!("lr {} outside (0, 1]", self.lr));
        }
        if !(0.0..=0.1).contains(&self.weight_decay) {
            return bad(format!("weight decay {} outside [0, 0.1]", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("momentum and betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0 && self.final_lr > 0.0) {
            return bad("eps and final_lr must be positive".into());
        }
        Ok(())
    }
}

/// AdaBound's per-coordinate step-size interval at step `t ≥ 1`.
pub fn adabound_bounds(final_lr: f64, beta2: f64, t: u64) -> (f64, f64) {
    let t = t as f64;
    (
        final_lr * (1.0 - 1.0 / ((1.0 - beta2) * t + 1.0)),
        final_lr * (1.0 + 1.0 / ((1.0 - beta2) * t)),
    )
}

/// Per-parameter moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub spec: OptimizerSpec,
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update at learning rate `lr`. Nothing is modified if any gradient
    /// is non-finite.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<(), NnError> {
        for p in params.iter() {
            let count = p.grad.iter().filter(|g| !g.is_finite()).count();
            if count > 0 {
                return Err(NnError::NonFiniteGradient {
                    param: p.name.clone(),
                    count,
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if self.spec.kind != OptimizerKind::Sgd {
                self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
            }
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed between steps");
        self.t += 1;
        let s = &self.spec;
        let t = self.t as i32;
        let (bc1, bc2) = (1.0 - s.beta1.powi(t), 1.0 - s.beta2.powi(t));
        let (lo, hi) = adabound_bounds(s.final_lr, s.beta2, self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let m = &mut self.first[k];
            for i in 0..p.value.len() {
                let w = p.value[i].as_f64();
                let g = p.grad[i].as_f64() + s.weight_decay * w;
                let next = match s.kind {
                    OptimizerKind::Sgd => {
                        m[i] = s.momentum * m[i] + g;
                        w - lr * m[i]
                    }
                    OptimizerKind::Adam | OptimizerKind::Adabound => {
                        let v = &mut self.second[k];
                        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
                        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
                        let m_hat = m[i] / bc1;
                        let denom = (v[i] / bc2).sqrt() + s.eps;
                        match s.kind {
                            OptimizerKind::Adam => w - lr * m_hat / denom,
                            _ => w - (lr / denom).clamp(lo, hi) * m_hat,
                        }
                    }
                };
                p.value[i] = T::of_f64(next);
            }
        }
        Ok(())
    }
}
