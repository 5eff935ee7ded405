use agc_nn::optim::{OptimizerKind, OptimizerSpec};
use agc_nn::schedule::{ScheduleKind, ScheduleSpec};
use agc_nn::train::{evaluate, train, MemoryDataset, StopReason, TrainConfig};
use agc_nn::{build_model, ModelConfig, NnError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_set(n: usize, size: usize, seed: u64) -> MemoryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MemoryDataset {
        samples: (0..n)
            .map(|_| (0..3 * size * size).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect(),
        labels: (0..n).map(|i| i % 4).collect(),
    }
}

fn small_net(seed: u64) -> agc_nn::Network<f32> {
    build_model(&ModelConfig::dilated_resnet(16).narrow(4), seed).unwrap()
}

#[test]
fn frozen_weights_stop_after_eleven_epochs() {
    let constant = MemoryDataset {
        samples: vec![vec![0.5; 3 * 16 * 16]; 8],
        labels: vec![0, 1, 2, 3, 0, 1, 2, 3],
    };
    // Batch-norm running statistics keep moving at lr = 0, so the frozen
    // fixture uses the stack without normalisation.
    let mut net = build_model::<f32>(&ModelConfig::alexnet_baseline(16).narrow(4), 0).unwrap();
    let opt = OptimizerSpec::new(OptimizerKind::Sgd, 0.0, 0.0);
    let state = train(
        &mut net,
        &constant,
        &constant,
        &opt,
        &ScheduleSpec::new(ScheduleKind::Cosine),
        &TrainConfig { batch_size: 4, ..TrainConfig::default() },
    )
    .unwrap();
    assert_eq!(state.epochs_run, 11);
    assert_eq!(state.history.len(), 11);
    assert_eq!(state.stop_reason, StopReason::EarlyStop);
    assert_eq!(state.best_epoch, 0);
    let v0 = state.history[0].val_loss;
    assert!(state.history.iter().all(|r| r.val_loss == v0));
}

#[test]
fn training_fits_a_tiny_set_and_is_reproducible() {
    let data = noise_set(8, 16, 1);
    let opt = OptimizerSpec::new(OptimizerKind::Adam, 0.01, 0.0);
    let sched = ScheduleSpec::new(ScheduleKind::Step);
    let cfg = TrainConfig { batch_size: 2, run_seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut net = small_net(3);
        let s = train(&mut net, &data, &data, &opt, &sched, &cfg).unwrap();
        (s, net.state())
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.history, b.history);
    assert_eq!(wa, wb);
    assert!(a.history.iter().any(|r| r.train_acc == 1.0), "never fit");
    assert!(a.history.len() <= 50);
    assert!(a.epochs_since_improve <= cfg.patience);
}

#[test]
fn best_epoch_weights_are_restored() {
    let train_set = noise_set(12, 16, 2);
    let val_set = noise_set(8, 16, 3);
    let mut net = small_net(4);
    let state = train(
        &mut net,
        &train_set,
        &val_set,
        &OptimizerSpec::new(OptimizerKind::Adam, 0.05, 0.0),
        &ScheduleSpec::new(ScheduleKind::Plateau),
        &TrainConfig { max_epochs: 15, patience: 3, batch_size: 4, ..TrainConfig::default() },
    )
    .unwrap();
    let best = state.best().val_loss;
    assert_eq!(best, state.best_val_loss);
    assert!(state.history.iter().all(|r| r.val_loss >= best));
    let eval = evaluate(&mut net, &val_set, 4).unwrap();
    assert!((eval.loss - best).abs() < 1e-6, "{} vs {best}", eval.loss);
}

#[test]
fn non_finite_inputs_abort_the_run() {
    let mut bad = noise_set(4, 16, 5);
    bad.samples[1][7] = f32::NAN;
    let mut net = small_net(0);
    let err = train(
        &mut net,
        &bad,
        &noise_set(4, 16, 6),
        &OptimizerSpec::new(OptimizerKind::Sgd, 0.01, 0.0),
        &ScheduleSpec::new(ScheduleKind::Cosine),
        &TrainConfig { batch_size: 4, ..TrainConfig::default() },
    )
    .unwrap_err();
    assert!(matches!(err, NnError::NonFiniteGradient { .. }), "{err}");
}

#[test]
fn time_budget_is_respected() {
    let data = noise_set(8, 16, 1);
    let mut net = small_net(0);
    let state = train(
        &mut net,
        &data,
        &data,
        &OptimizerSpec::new(OptimizerKind::Adam, 0.001, 0.0),
        &ScheduleSpec::new(ScheduleKind::Cosine),
        &TrainConfig { batch_size: 4, time_budget_secs: Some(0.0), ..TrainConfig::default() },
    )
    .unwrap();
    assert_eq!(state.epochs_run, 1);
    assert_eq!(state.stop_reason, StopReason::TimeBudget);
}
