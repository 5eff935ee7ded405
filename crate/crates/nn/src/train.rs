//! Mini-batch training with early stopping on validation loss.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{argmax, softmax, softmax_cross_entropy, Network};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::scalar::Scalar;
use crate::schedule::{ScheduleSpec, Scheduler};
use crate::tensor::{NnError, Tensor};

/// Indexed source of labelled CHW samples.
pub trait Dataset {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, index: usize) -> usize;
    /// `epoch` is `Some` for training draws, letting an implementation key its
    /// augmentation on `(epoch, index)`.
    fn sample(&self, index: usize, epoch: Option<usize>) -> Result<Vec<f32>, NnError>;
}

/// Pre-materialised samples with no augmentation.
#[derive(Debug, Clone, Default)]
pub struct MemoryDataset {
    pub samples: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset for MemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
    fn sample(&self, index: usize, _epoch: Option<usize>) -> Result<Vec<f32>, NnError> {
        Ok(self.samples[index].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub run_seed: u64,
    /// Wall-clock cap in seconds; no new epoch starts once the last epoch's
    /// duration would overrun it.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 10,
            min_delta: 1e-6,
            batch_size: 32,
            run_seed: 0,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(NnError::InvalidConfig(
                "max_epochs, batch_size and patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    TimeBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_since_improve: usize,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub wall_time_secs: f64,
}

impl TrainState {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

/// Loss, accuracy and per-sample outputs of an eval-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub probs: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Splits a permutation into batches, folding a trailing single sample into
/// the batch before it so batch norm never sees a batch of one.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Per-epoch shuffle, a pure function of `(run_seed, epoch)`.
pub fn epoch_order(n: usize, run_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn load_batch<T: Scalar>(
    net: &Network<T>,
    ds: &dyn Dataset,
    idx: &[usize],
    epoch: Option<usize>,
) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    let shape = net.input_shape();
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(per * idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = ds.sample(i, epoch)?;
        if s.len() != per {
            return Err(NnError::ShapeMismatch(format!(
                "sample {i} has {} values, model expects {per}",
                s.len()
            )));
        }
        data.extend(s.into_iter().map(|v| T::of_f64(v as f64)));
        labels.push(ds.label(i));
    }
    let t = Tensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((t, labels))
}

/// One optimiser step on a batch; returns the loss and the number of correct
/// train-mode predictions.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer,
    x: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, usize), NnError> {
    net.zero_grad();
    let (loss, logits) = net.loss_and_backward(x, labels)?;
    let correct = count_correct(&logits, labels);
    opt.step(&mut net.params_mut(), lr)?;
    Ok((loss, correct))
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    softmax(logits)
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count()
}

pub fn evaluate<T: Scalar>(net: &mut Network<T>, ds: &dyn Dataset, batch_size: usize) -> Result<Evaluation, NnError> {
    if ds.is_empty() {
        return Err(NnError::InvalidConfig("cannot evaluate an empty dataset".into()));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for idx in order.chunks(batch_size.max(1)) {
        let (x, y) = load_batch(net, ds, idx, None)?;
        let logits = net.predict(&x)?;
        let (l, _) = softmax_cross_entropy(&logits, &y)?;
        loss += l * idx.len() as f64;
        probs.extend(softmax(&logits));
        labels.extend(y);
    }
    let predictions: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let correct = predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        loss: loss / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
        probs,
        predictions,
        labels,
    })
}

/// Trains until early stopping, `max_epochs` or the time budget, then
/// restores the weights of the epoch with the lowest validation loss.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &dyn Dataset,
    val_set: &dyn Dataset,
    opt_spec: &OptimizerSpec,
    sched_spec: &ScheduleSpec,
    cfg: &TrainConfig,
) -> Result<TrainState, NnError> {
    cfg.validate()?;
    opt_spec.validate()?;
    sched_spec.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(NnError::InvalidConfig("train and validation sets must be non-empty".into()));
    }
    let start = Instant::now();
    let mut opt = Optimizer::new(opt_spec.clone());
    let mut sched = Scheduler::new(sched_spec.clone(), opt_spec.lr);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_state = net.state();
    let mut since = 0;
    let mut stop = StopReason::MaxEpochs;
    let mut last_epoch_secs = 0.0;

    for epoch in 0..cfg.max_epochs {
        if let Some(budget) = cfg.time_budget_secs {
            if epoch > 0 && start.elapsed().as_secs_f64() + last_epoch_secs > budget {
                stop = StopReason::TimeBudget;
                break;
            }
        }
        let t0 = Instant::now();
        let lr = sched.lr(epoch);
        let order = epoch_order(train_set.len(), cfg.run_seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for idx in batches(&order, cfg.batch_size) {
            let (x, y) = load_batch(net, train_set, &idx, Some(epoch))?;
            let (l, c) = train_step(net, &mut opt, &x, &y, lr)?;
            loss_sum += l * idx.len() as f64;
            correct += c;
        }
        let val = evaluate(net, val_set, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}, lr {:.2e}",
            rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, lr
        );
        history.push(rec);
        sched.end_epoch(Some(val.loss))?;
        if val.loss < best_val - cfg.min_delta {
            best_val = val.loss;
            best_epoch = epoch;
            best_state = net.state();
            since = 0;
        } else {
            since += 1;
        }
        last_epoch_secs = t0.elapsed().as_secs_f64();
        if since >= cfg.patience {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    net.load_state(&best_state)?;
    Ok(TrainState {
        epochs_run: history.len(),
        best_epoch,
        best_val_loss: best_val,
        epochs_since_improve: since,
        history,
        stop_reason: stop,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
