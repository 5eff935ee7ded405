//! Synthetic calibration workcell: a checkerboard on the robot flange seen by
//! a fixed camera. Used to exercise intrinsics, target-pose and hand-eye
//! estimation end to end against known ground truth.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    calibrate_zhang, estimate_target_pose, synthesize_view, CameraError, CameraModel, Correspondence,
    PlanarTarget,
};
use crate::geometry::{pose_error, RigidTransform};
use crate::handeye::{register_workcell, HandEyeError, WorkcellRegistration};
use crate::seed::{derive_seed, rng_from_seed, SeedPart};

#[derive(Debug, Error)]
pub enum WorkcellError {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    HandEye(#[from] HandEyeError),
    #[error("invalid workcell config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkcellConfig {
    pub poses: usize,
    pub noise_px: f64,
    pub board_rows: usize,
    pub board_cols: usize,
    pub board_pitch_mm: f64,
    /// Half-range of the random target tilt, degrees.
    pub tilt_deg: f64,
    /// Nominal camera-to-target standoff, mm.
    pub standoff_mm: f64,
    /// Camera fed to per-view pose estimation.
    pub pose_intrinsics: IntrinsicsSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicsSource {
    /// The scene's true camera: isolates hand-eye error from intrinsics error.
    #[default]
    Known,
    /// The Zhang estimate from the same views.
    Estimated,
}

impl Default for WorkcellConfig {
    fn default() -> Self {
        Self {
            poses: 10,
            noise_px: 0.5,
            board_rows: 11,
            board_cols: 15,
            board_pitch_mm: 12.0,
            tilt_deg: 40.0,
            standoff_mm: 300.0,
            pose_intrinsics: IntrinsicsSource::Known,
        }
    }
}

impl WorkcellConfig {
    pub fn validate(&self) -> Result<(), WorkcellError> {
        let bad = |m: &str| Err(WorkcellError::InvalidConfig(m.into()));
        if self.poses < 3 {
            return bad("at least 3 poses are needed");
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return bad("noise_px must be finite and non-negative");
        }
        if self.board_rows < 2 || self.board_cols < 2 || self.board_rows * self.board_cols < 4 {
            return bad("board needs at least a 2x2 corner grid");
        }
        if !(self.board_pitch_mm > 0.0) || !(self.standoff_mm > 0.0) {
            return bad("pitch and standoff must be positive");
        }
        if !(0.0..80.0).contains(&self.tilt_deg) {
            return bad("tilt_deg must be in [0, 80)");
        }
        Ok(())
    }
}

/// Ground truth for one synthetic calibration session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkcellScene {
    pub camera: CameraModel,
    pub target: PlanarTarget,
    pub t_rc: RigidTransform,
    pub t_bt: RigidTransform,
    pub t_ch: RigidTransform,
    /// Flange poses `T_RB`, one per view.
    pub robot_poses: Vec<RigidTransform>,
    /// True target poses `T_CT = T_RC⁻¹·T_RB·T_BT`.
    pub target_poses: Vec<RigidTransform>,
}

fn jitter(rng: &mut impl Rng, half: f64) -> f64 {
    rng.random_range(-half..=half)
}

/// Fixed ground-truth frames; only the robot poses are random.
pub fn ground_truth_frames() -> (CameraModel, RigidTransform, RigidTransform, RigidTransform) {
    let camera = CameraModel::pinhole(820.0, 815.0, 322.5, 241.0).expect("valid ground-truth camera");
    let mut t_rc = RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, -0.1), 2.4);
    t_rc.translation = Vector3::new(420.0, -90.0, 310.0);
    let mut t_bt = RigidTransform::from_axis_angle(Vector3::new(0.6, -0.3, 0.7), 0.5);
    t_bt.translation = Vector3::new(15.0, -8.0, 62.0);
    // Camera to the gel backing plate: the sensor looks along +z at 25 mm.
    let t_ch = RigidTransform::from_translation(0.0, 0.0, 25.0);
    (camera, t_rc, t_bt, t_ch)
}

impl WorkcellScene {
    pub fn generate(cfg: &WorkcellConfig, seed: u64) -> Result<Self, WorkcellError> {
        cfg.validate()?;
        let (camera, t_rc, t_bt, t_ch) = ground_truth_frames();
        let target = PlanarTarget::checkerboard(cfg.board_rows, cfg.board_cols, cfg.board_pitch_mm);
        let mut rng = rng_from_seed(derive_seed(&[SeedPart::Int(seed), SeedPart::Str("workcell")]));
        let tilt = cfg.tilt_deg.to_radians();
        let mut target_poses = Vec::with_capacity(cfg.poses);
        for _ in 0..cfg.poses {
            // Board roughly facing the camera, tilted about a random in-plane axis.
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let axis = Vector3::new(phi.cos(), phi.sin(), jitter(&mut rng, 0.3));
            let mut ct = RigidTransform::from_axis_angle(axis, rng.random_range(0.3 * tilt..=tilt))
                .compose(&RigidTransform::rot_z(jitter(&mut rng, 0.6)));
            let z = cfg.standoff_mm * rng.random_range(0.85..1.15);
            ct.translation = Vector3::new(jitter(&mut rng, 0.08 * z), jitter(&mut rng, 0.06 * z), z);
            target_poses.push(ct);
        }
        let robot_poses = target_poses
            .iter()
            .map(|ct| t_rc.compose(ct).compose(&t_bt.inverse()))
            .collect();
        Ok(Self {
            camera,
            target,
            t_rc,
            t_bt,
            t_ch,
            robot_poses,
            target_poses,
        })
    }

    /// Corner detections for every pose with iid pixel noise.
    pub fn observe(&self, noise_px: f64, seed: u64) -> Result<Vec<Vec<Correspondence>>, WorkcellError> {
        let mut rng = rng_from_seed(derive_seed(&[SeedPart::Int(seed), SeedPart::Str("corners")]));
        self.target_poses
            .iter()
            .map(|ct| Ok(synthesize_view(&self.camera, ct, &self.target, noise_px, &mut rng)?))
            .collect()
    }
}

/// Recovered quantities next to their errors against the scene truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub camera: CameraModel,
    pub camera_truth: CameraModel,
    /// Relative errors of fx, fy, cx, cy.
    pub intrinsics_rel_err: [f64; 4],
    pub registration: WorkcellRegistration,
    pub t_bt_error: PoseErrorReport,
    pub t_rc_error: PoseErrorReport,
    pub noise_px: f64,
    pub poses: usize,
    pub pose_intrinsics: IntrinsicsSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub rot_rad: f64,
    pub trans_mm: f64,
}

impl From<(f64, f64)> for PoseErrorReport {
    fn from((rot_rad, trans_mm): (f64, f64)) -> Self {
        Self { rot_rad, trans_mm }
    }
}

pub fn intrinsics_rel_err(est: &CameraModel, truth: &CameraModel) -> [f64; 4] {
    let r = |a: f64, b: f64| (a - b).abs() / b.abs();
    [r(est.fx, truth.fx), r(est.fy, truth.fy), r(est.cx, truth.cx), r(est.cy, truth.cy)]
}

/// Full session: Zhang intrinsics from the observed views, per-view target
/// pose, then hand-eye registration.
pub fn calibrate_scene(
    scene: &WorkcellScene,
    views: &[Vec<Correspondence>],
    noise_px: f64,
    source: IntrinsicsSource,
) -> Result<CalibrationReport, WorkcellError> {
    let camera = calibrate_zhang(views)?;
    let pose_cam = match source {
        IntrinsicsSource::Known => scene.camera,
        IntrinsicsSource::Estimated => camera,
    };
    let measured = views
        .iter()
        .map(|v| estimate_target_pose(&pose_cam, v))
        .collect::<Result<Vec<_>, _>>()?;
    let registration = register_workcell(&scene.robot_poses, &measured, scene.t_ch)?;
    Ok(CalibrationReport {
        camera,
        camera_truth: scene.camera,
        intrinsics_rel_err: intrinsics_rel_err(&camera, &scene.camera),
        t_bt_error: pose_error(&registration.t_bt, &scene.t_bt).into(),
        t_rc_error: pose_error(&registration.t_rc, &scene.t_rc).into(),
        registration,
        noise_px,
        poses: scene.robot_poses.len(),
        pose_intrinsics: source,
    })
}

/// Generates, observes and calibrates in one call.
pub fn run_calibration(cfg: &WorkcellConfig, seed: u64) -> Result<CalibrationReport, WorkcellError> {
    let scene = WorkcellScene::generate(cfg, seed)?;
    let views = scene.observe(cfg.noise_px, seed)?;
    calibrate_scene(&scene, &views, cfg.noise_px, cfg.pose_intrinsics)
}
