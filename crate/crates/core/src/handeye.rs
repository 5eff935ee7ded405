//! Separable `AX = XB` hand-eye calibration: rotation from the smallest
//! eigenvector of an accumulated quaternion system, then translation by
//! linear least squares.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_error, rotation_angle, RigidTransform, UnitQuaternion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandEyeError {
    #[error("need at least 2 motion pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),
    #[error("robot poses ({robot}) and camera views ({camera}) differ in length")]
    MisalignedInput { robot: usize, camera: usize },
}

/// Rotations smaller than this carry almost no axis information.
pub const WEAK_ROTATION_RAD: f64 = 1e-3;
const MIN_AXIS_SPREAD_RAD: f64 = 1e-2;
const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

/// One relative motion: `a` in the robot chain, `b` as seen by the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPair {
    pub a: RigidTransform,
    pub b: RigidTransform,
}

impl MotionPair {
    /// Pair from poses `i` and `j`: `A = T_RBⱼ⁻¹·T_RBᵢ`, `B = T_CTⱼ⁻¹·T_CTᵢ`.
    pub fn from_poses(
        t_rb_i: &RigidTransform,
        t_rb_j: &RigidTransform,
        t_ct_i: &RigidTransform,
        t_ct_j: &RigidTransform,
    ) -> Self {
        Self {
            a: t_rb_j.inverse().compose(t_rb_i),
            b: t_ct_j.inverse().compose(t_ct_i),
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        self.a.rotation_angle()
    }

    pub fn is_weak(&self) -> bool {
        self.a.rotation_angle() < WEAK_ROTATION_RAD || self.b.rotation_angle() < WEAK_ROTATION_RAD
    }
}

fn rotation_axis(r: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let n = v.norm();
    if n > 1e-12 {
        return Some(v / n);
    }
    // Near π the skew part vanishes; take the dominant column of R + I.
    if rotation_angle(r) > 1.0 {
        let s = r + Matrix3::identity();
        let best = (0..3)
            .max_by(|&i, &j| s.column(i).norm().total_cmp(&s.column(j).norm()))
            .unwrap();
        let c = s.column(best).into_owned();
        return Some(c / c.norm());
    }
    None
}

fn left_mul(q: &UnitQuaternion) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
}

fn right_mul(q: &UnitQuaternion) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix4::new(w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric 4×4 matrix.
/// Returns eigenvalues and the matrix whose columns are eigenvectors.
pub fn jacobi_eigen4(m: &Matrix4<f64>) -> (Vector4<f64>, Matrix4<f64>) {
    let mut a = *m;
    let mut v = Matrix4::identity();
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..4)
            .flat_map(|p| ((p + 1)..4).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)] * a[(p, q)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..3 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (Vector4::new(a[(0, 0)], a[(1, 1)], a[(2, 2)], a[(3, 3)]), v)
}

fn check_axis_diversity(pairs: &[MotionPair]) -> Result<(), HandEyeError> {
    let axes: Vec<Vector3<f64>> = pairs
        .iter()
        .filter(|p| p.a.rotation_angle() >= WEAK_ROTATION_RAD)
        .filter_map(|p| rotation_axis(&p.a.rotation))
        .collect();
    let mut spread: f64 = 0.0;
    for i in 0..axes.len() {
        for j in (i + 1)..axes.len() {
            let c = axes[i].dot(&axes[j]).abs().min(1.0);
            spread = spread.max(c.acos());
        }
    }
    if spread <= MIN_AXIS_SPREAD_RAD {
        return Err(HandEyeError::DegenerateMotion(format!(
            "rotation axes are parallel (max spread {spread:.3e} rad)"
        )));
    }
    Ok(())
}

/// Solves `AᵢX = XBᵢ` for the fixed transform `X`.
pub fn solve_axxb_separable(pairs: &[MotionPair]) -> Result<RigidTransform, HandEyeError> {
    if pairs.len() < 2 {
        return Err(HandEyeError::TooFewPairs(pairs.len()));
    }
    check_axis_diversity(pairs)?;

    let mut m = Matrix4::zeros();
    for p in pairs {
        let qa = UnitQuaternion::from_matrix(&p.a.rotation);
        let qb = UnitQuaternion::from_matrix(&p.b.rotation);
        let d = left_mul(&qa) - right_mul(&qb);
        m += d.transpose() * d;
    }
    let (vals, vecs) = jacobi_eigen4(&m);
    let imin = (0..4).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap();
    let qv = vecs.column(imin);
    let qx = UnitQuaternion::new(qv[0], qv[1], qv[2], qv[3])
        .ok_or_else(|| HandEyeError::DegenerateMotion("null rotation eigenvector".into()))?;
    let rx = qx.to_matrix();

    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in pairs {
        let c = p.a.rotation - Matrix3::identity();
        let rhs = rx * p.b.translation - p.a.translation;
        ata += c.transpose() * c;
        atb += c.transpose() * rhs;
    }
    let eig = ata.symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(hi > 0.0) || lo / hi < 1e-12 {
        return Err(HandEyeError::DegenerateMotion(
            "translation system has rank < 3".into(),
        ));
    }
    let tx = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| HandEyeError::DegenerateMotion("translation normal matrix not SPD".into()))?;
    Ok(RigidTransform::new(rx, tx))
}

/// `Σ ‖(AᵢX) ⊖ (XBᵢ)‖`: rotation geodesic plus translation norm per pair.
pub fn axxb_residual(pairs: &[MotionPair], x: &RigidTransform) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let (r, t) = pose_error(&p.a.compose(x), &x.compose(&p.b));
            r + t
        })
        .sum()
}

/// Consecutive pairs `(i, i+1)` plus stride-2 skips `(i, i+2)`.
pub fn build_motion_pairs(t_rb: &[RigidTransform], t_ct: &[RigidTransform]) -> Vec<MotionPair> {
    let n = t_rb.len().min(t_ct.len());
    let mut pairs = Vec::new();
    for stride in [1, 2] {
        for i in 0..n.saturating_sub(stride) {
            let j = i + stride;
            pairs.push(MotionPair::from_poses(&t_rb[i], &t_rb[j], &t_ct[i], &t_ct[j]));
        }
    }
    pairs
}

/// Sign-aligned quaternion mean of rotations plus arithmetic mean of
/// translations.
pub fn average_transforms(ts: &[RigidTransform]) -> RigidTransform {
    if ts.is_empty() {
        return RigidTransform::identity();
    }
    let qs: Vec<UnitQuaternion> = ts.iter().map(|t| UnitQuaternion::from_matrix(&t.rotation)).collect();
    let mut acc = [0.0; 4];
    for q in &qs {
        let sign = if q.dot(&qs[0]) < 0.0 { -1.0 } else { 1.0 };
        for (a, v) in acc.iter_mut().zip(q.to_array()) {
            *a += sign * v;
        }
    }
    let q = UnitQuaternion::from_array(acc).unwrap_or(qs[0]);
    let t = ts.iter().fold(Vector3::zeros(), |a, t| a + t.translation) / ts.len() as f64;
    RigidTransform::new(q.to_matrix(), t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkcellRegistration {
    pub t_rc: RigidTransform,
    pub t_bt: RigidTransform,
    /// Carried from the scene; not estimated.
    pub t_ch: RigidTransform,
    pub residual_rot: f64,
    pub residual_trans: f64,
    pub pair_count: usize,
    pub pair_rotation_angles: Vec<f64>,
    pub weak_pairs: usize,
}

/// Estimates `T_BT` (hand-eye) and `T_RC` from index-aligned robot flange
/// poses and camera target-pose measurements.
pub fn register_workcell(
    robot_poses: &[RigidTransform],
    camera_views: &[RigidTransform],
    t_ch: RigidTransform,
) -> Result<WorkcellRegistration, HandEyeError> {
    if robot_poses.len() != camera_views.len() {
        return Err(HandEyeError::MisalignedInput {
            robot: robot_poses.len(),
            camera: camera_views.len(),
        });
    }
    let pairs = build_motion_pairs(robot_poses, camera_views);
    let t_bt = solve_axxb_separable(&pairs)?;
    let per_view: Vec<RigidTransform> = robot_poses
        .iter()
        .zip(camera_views)
        .map(|(rb, ct)| rb.compose(&t_bt).compose(&ct.inverse()))
        .collect();
    let t_rc = average_transforms(&per_view);
    let (mut residual_rot, mut residual_trans) = (0.0f64, 0.0f64);
    for t in &per_view {
        let (r, d) = pose_error(t, &t_rc);
        residual_rot = residual_rot.max(r);
        residual_trans = residual_trans.max(d);
    }
    Ok(WorkcellRegistration {
        t_rc,
        t_bt,
        t_ch,
        residual_rot,
        residual_trans,
        pair_count: pairs.len(),
        pair_rotation_angles: pairs.iter().map(MotionPair::rotation_angle).collect(),
        weak_pairs: pairs.iter().filter(|p| p.is_weak()).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_motion(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let mut t = RigidTransform::from_axis_angle(axis, rng.random_range(0.2..1.5));
        t.translation = Vector3::new(
            rng.random_range(-200.0..200.0),
            rng.random_range(-200.0..200.0),
            rng.random_range(-200.0..200.0),
        );
        t
    }

    fn known_x() -> RigidTransform {
        let mut x = RigidTransform::from_axis_angle(Vector3::new(0.3, -0.5, 0.8), 1.1);
        x.translation = Vector3::new(12.0, -40.0, 85.0);
        x
    }

    fn synth_pairs(x: &RigidTransform, n: usize, seed: u64) -> Vec<MotionPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a = random_motion(&mut rng);
                MotionPair {
                    a,
                    b: x.inverse().compose(&a).compose(x),
                }
            })
            .collect()
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = Matrix4::new(4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.2, 0.1, 0.5, 0.2, 2.0, 0.3, 0.0, 0.1, 0.3, 1.0);
        let (vals, vecs) = jacobi_eigen4(&m);
        for i in 0..4 {
            let v = vecs.column(i);
            assert!((m * v - vals[i] * v).norm() < 1e-10);
        }
        assert!((vecs.transpose() * vecs - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn identical_motions_give_identity() {
        let pairs = vec![
            MotionPair {
                a: RigidTransform::rot_x(0.5).compose(&RigidTransform::from_translation(1.0, 2.0, 3.0)),
                b: RigidTransform::rot_x(0.5).compose(&RigidTransform::from_translation(1.0, 2.0, 3.0)),
            },
            MotionPair {
                a: RigidTransform::rot_y(0.7).compose(&RigidTransform::from_translation(-4.0, 0.0, 2.0)),
                b: RigidTransform::rot_y(0.7).compose(&RigidTransform::from_translation(-4.0, 0.0, 2.0)),
            },
        ];
        let x = solve_axxb_separable(&pairs).unwrap();
        assert!(max_abs_diff(&x, &RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn recovers_known_x() {
        let x = known_x();
        let pairs = synth_pairs(&x, 10, 42);
        let est = solve_axxb_separable(&pairs).unwrap();
        let (rot, trans) = pose_error(&est, &x);
        assert!(rot < 1e-6 && trans < 1e-6, "rot {rot:e} trans {trans:e}");
        assert!(axxb_residual(&pairs, &est) < 1e-8);
    }

    #[test]
    fn parallel_axes_are_degenerate() {
        let x = known_x();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..10)
            .map(|_| {
                let mut a = RigidTransform::rot_z(rng.random_range(0.1..PI));
                a.translation = Vector3::new(rng.random_range(-50.0..50.0), 3.0, 1.0);
                MotionPair {
                    a,
                    b: x.inverse().compose(&a).compose(&x),
                }
            })
            .collect();
        assert!(matches!(
            solve_axxb_separable(&pairs),
            Err(HandEyeError::DegenerateMotion(_))
        ));
        assert_eq!(
            solve_axxb_separable(&pairs[..1]),
            Err(HandEyeError::TooFewPairs(1))
        );
    }

    #[test]
    fn reordering_pairs_does_not_change_solution() {
        let x = known_x();
        let pairs = synth_pairs(&x, 8, 7);
        let mut rev = pairs.clone();
        rev.reverse();
        let a = solve_axxb_separable(&pairs).unwrap();
        let b = solve_axxb_separable(&rev).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn redundant_pair_does_not_increase_residual() {
        let x = known_x();
        let pairs = synth_pairs(&x, 6, 9);
        let base = solve_axxb_separable(&pairs).unwrap();
        let r0 = axxb_residual(&pairs, &base);
        let mut more = pairs.clone();
        more.push(pairs[2]);
        let est = solve_axxb_separable(&more).unwrap();
        let r1 = axxb_residual(&pairs, &est);
        assert!(r1 <= r0 + 1e-9);
    }

    #[test]
    fn register_rejects_misaligned_and_short_inputs() {
        let t = vec![RigidTransform::identity(); 3];
        assert_eq!(
            register_workcell(&t, &t[..2], RigidTransform::identity()),
            Err(HandEyeError::MisalignedInput { robot: 3, camera: 2 })
        );
        let two = vec![RigidTransform::rot_x(0.3), RigidTransform::rot_y(0.2)];
        assert_eq!(
            register_workcell(&two, &two, RigidTransform::identity()),
            Err(HandEyeError::TooFewPairs(1))
        );
    }

    #[test]
    fn quaternion_average_handles_antipodes() {
        let a = RigidTransform::rot_z(0.2);
        let b = RigidTransform::rot_z(0.4);
        let m = average_transforms(&[a, b]);
        assert!((m.rotation_angle() - 0.3).abs() < 1e-12);
    }
}
