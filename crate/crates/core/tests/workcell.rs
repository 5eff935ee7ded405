use agc_core::workcell::{run_calibration, WorkcellConfig, WorkcellScene};

#[test]
fn noisy_sessions_stay_within_bounds() {
    let cfg = WorkcellConfig::default();
    let (mut worst_rot, mut worst_trans) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let rep = run_calibration(&cfg, seed).unwrap();
        for e in [rep.t_bt_error, rep.t_rc_error] {
            worst_rot = worst_rot.max(e.rot_rad);
            worst_trans = worst_trans.max(e.trans_mm);
        }
    }
    println!("worst over 20 seeds: {worst_rot:.3e} rad, {worst_trans:.3e} mm");
    assert!(worst_rot < 0.02 && worst_trans < 1.0);
}

#[test]
fn zhang_from_five_clean_views() {
    let cfg = WorkcellConfig {
        poses: 5,
        noise_px: 0.0,
        ..Default::default()
    };
    let rep = run_calibration(&cfg, 11).unwrap();
    assert!(rep.intrinsics_rel_err.iter().all(|e| *e < 1e-4), "{:?}", rep.intrinsics_rel_err);
}

#[test]
fn scene_is_seed_deterministic() {
    let cfg = WorkcellConfig::default();
    let a = WorkcellScene::generate(&cfg, 5).unwrap();
    let b = WorkcellScene::generate(&cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.observe(0.5, 5).unwrap(), b.observe(0.5, 5).unwrap());
    assert_ne!(a.robot_poses, WorkcellScene::generate(&cfg, 6).unwrap().robot_poses);
}
