use agc_nn::checkpoint::{read_checkpoint, write_checkpoint};
use agc_nn::gradcheck::check_network;
use agc_nn::model::{softmax_cross_entropy, Arch};
use agc_nn::optim::{Optimizer, OptimizerKind, OptimizerSpec};
use agc_nn::train::train_step;
use agc_nn::{build_model, ModelConfig, NnError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images<T: agc_nn::scalar::Scalar>(n: usize, size: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, size, size], |_| T::of_f64(rng.random_range(-1.0..1.0)))
}

#[test]
fn desk_scale_parameter_counts() {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let bn = |c: usize| 2 * c;
    let stem = conv(3, 16, 3) + bn(16);
    let projected = |cin: usize, cout: usize| {
        conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout) + conv(cin, cout, 1) + bn(cout)
    };
    let plain = |c: usize| 2 * (conv(c, c, 3) + bn(c));
    let fc = 64 * 4 + 4;
    let expected = stem + projected(16, 16) + plain(16) + projected(16, 32) + plain(32) + projected(32, 64) + plain(64) + fc;
    assert_eq!(expected, 175_156);
    for arch in [Arch::DilatedResnet, Arch::ResnetBaseline] {
        let net = build_model::<f32>(&ModelConfig::for_arch(arch, 64), 0).unwrap();
        assert_eq!(net.param_count(), expected, "{arch}");
    }
    let alex = (3 * 16 * 25 + 16)
        + (conv(16, 32, 3) + 32)
        + (conv(32, 48, 3) + 48)
        + (conv(48, 48, 3) + 48)
        + (conv(48, 32, 3) + 32)
        + (32 * 8 * 8 * 128 + 128)
        + (128 * 4 + 4);
    let net = build_model::<f32>(&ModelConfig::alexnet_baseline(64), 0).unwrap();
    assert_eq!(net.param_count(), alex);
}

#[test]
fn logits_have_one_row_per_image() {
    for arch in Arch::ALL {
        let mut net = build_model::<f32>(&ModelConfig::for_arch(arch, 64), 1).unwrap();
        let y = net.forward(&images(3, 64, 0), true).unwrap();
        assert_eq!(y.shape, vec![3, 4], "{arch}");
        assert!(y.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn dilated_stages_keep_resolution() {
    let mut net = build_model::<f32>(&ModelConfig::dilated_resnet(64), 0).unwrap();
    let shapes = net.trace_shapes(&images(1, 64, 0)).unwrap();
    let hw = |prefix: &str| -> Vec<Vec<usize>> {
        shapes.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, s)| s[2..].to_vec()).collect()
    };
    let s1 = hw("stage1");
    assert_eq!(s1.last().unwrap(), &vec![32, 32]);
    for s in hw("stage2").iter().chain(&hw("stage3")) {
        assert_eq!(s, s1.last().unwrap());
    }
    let mut base = build_model::<f32>(&ModelConfig::resnet_baseline(64), 0).unwrap();
    let shapes = base.trace_shapes(&images(1, 64, 0)).unwrap();
    let last = |p: &str| shapes.iter().rev().find(|(n, _)| n.starts_with(p)).unwrap().1[2..].to_vec();
    assert_eq!((last("stage1"), last("stage2"), last("stage3")), (vec![32, 32], vec![16, 16], vec![8, 8]));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::dilated_resnet(64);
    cfg.dilations = vec![1, 2, 2];
    assert!(matches!(build_model::<f32>(&cfg, 0), Err(NnError::InvalidConfig(_))));
    cfg.dilations = vec![0, 1, 2];
    assert!(build_model::<f32>(&cfg, 0).is_err());
    let mut cfg = ModelConfig::resnet_baseline(64);
    cfg.blocks = vec![2, 2];
    assert!(build_model::<f32>(&cfg, 0).is_err());
}

#[test]
fn cross_entropy_closed_forms() {
    let uniform = Tensor::<f64>::zeros(&[3, 4]);
    let (loss, grad) = softmax_cross_entropy(&uniform, &[0, 1, 3]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    assert!((grad.data[0] - (0.25 - 1.0) / 3.0).abs() < 1e-15);
    let confident = Tensor::<f32>::new(vec![1, 4], vec![0.0, 1e4, 0.0, -1e4]).unwrap();
    let (loss, grad) = softmax_cross_entropy(&confident, &[1]).unwrap();
    assert!(loss < 1e-3 && loss.is_finite());
    assert!(grad.data.iter().all(|g| g.is_finite()));
    assert!(matches!(
        softmax_cross_entropy(&uniform, &[0, 4, 1]),
        Err(NnError::LabelOutOfRange { label: 4, classes: 4 })
    ));
}

/// Zero-initialised biases put units of a dead two-channel stack exactly on a
/// ReLU kink, where a central difference is meaningless. Nudge every offset
/// to a generic point first.
fn jitter_offsets(net: &mut agc_nn::Network<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in net.params_mut() {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

#[test]
fn narrow_networks_pass_whole_model_gradient_check() {
    for arch in Arch::ALL {
        for seed in 0..5u64 {
            let cfg = ModelConfig::for_arch(arch, 8).narrow(2);
            let mut net = build_model::<f64>(&cfg, seed).unwrap();
            jitter_offsets(&mut net, seed);
            let x = images(4, 8, 100 + seed);
            let rep = check_network(&mut net, &x, &[0, 1, 2, 3], usize::MAX).unwrap();
            assert!(rep.max_rel_err < 1e-5 && rep.skip_fraction() < 0.05, "{arch} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn eval_logits_do_not_depend_on_batch_company() {
    for arch in Arch::ALL {
        let mut net = build_model::<f32>(&ModelConfig::for_arch(arch, 32), 3).unwrap();
        // Move running statistics away from their initial values first.
        net.forward(&images(4, 32, 9), true).unwrap();
        let batch = images::<f32>(5, 32, 1);
        let all = net.predict(&batch).unwrap();
        let per = batch.sample_len();
        for i in 0..5 {
            let one = Tensor::new(vec![1, 3, 32, 32], batch.data[i * per..(i + 1) * per].to_vec()).unwrap();
            let y = net.predict(&one).unwrap();
            for k in 0..4 {
                assert!((y.data[k] - all.data[i * 4 + k]).abs() < 1e-6, "{arch}");
            }
        }
        assert_eq!(net.predict(&batch).unwrap(), all);
    }
}

#[test]
fn initialisation_is_seeded() {
    let cfg = ModelConfig::dilated_resnet(32);
    let a = build_model::<f32>(&cfg, 5).unwrap().state();
    assert_eq!(a, build_model::<f32>(&cfg, 5).unwrap().state());
    assert_ne!(a, build_model::<f32>(&cfg, 6).unwrap().state());
}

#[test]
fn every_architecture_memorises_eight_images() {
    let x = images::<f32>(8, 32, 42);
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    for arch in Arch::ALL {
        let mut net = build_model::<f32>(&ModelConfig::for_arch(arch, 32), 0).unwrap();
        let mut opt = Optimizer::new(OptimizerSpec::new(OptimizerKind::Adam, 0.01, 0.0));
        let mut reached = None;
        for step in 0..200 {
            let (_, correct) = train_step(&mut net, &mut opt, &x, &labels, 0.01).unwrap();
            if correct == 8 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "{arch} never fit the fixture");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = ModelConfig::dilated_resnet(16).narrow(4);
    let mut net = build_model::<f32>(&cfg, 11).unwrap();
    net.forward(&images(4, 16, 2), true).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&net, 7, serde_json::json!({"note": "x"}), &mut bytes).unwrap();
    let (mut back, header) = read_checkpoint::<f32>(&mut bytes.as_slice()).unwrap();
    assert_eq!(header.epoch, 7);
    assert_eq!(back.state(), net.state());
    let x = images(2, 16, 3);
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
    let mut again = Vec::new();
    write_checkpoint(&back, 7, serde_json::json!({"note": "x"}), &mut again).unwrap();
    assert_eq!(again, bytes);
    let truncated = &bytes[..bytes.len() - 4];
    assert!(read_checkpoint::<f32>(&mut &truncated[..]).is_err());
}

#[test]
fn desk_scale_dilated_model_passes_gradient_check() {
    for seed in 0..5u64 {
        let mut net = build_model::<f64>(&ModelConfig::dilated_resnet(16), seed).unwrap();
        jitter_offsets(&mut net, seed);
        let rep = check_network(&mut net, &images(4, 16, 200 + seed), &[3, 2, 1, 0], 6).unwrap();
        assert!(rep.max_rel_err < 1e-5 && rep.skip_fraction() < 0.05, "seed {seed}: {rep:?}");
    }
}
