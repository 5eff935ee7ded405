//! Pinhole camera with 10-term Brown distortion, planar-target
//! calibration and per-view target pose recovery.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {0:e} mm)")]
    BehindCamera(f64),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("need at least {need} views, got {got}")]
    InsufficientViews { need: usize, got: usize },
    #[error("invalid camera model: {0}")]
    InvalidModel(String),
}

const MIN_DEPTH: f64 = 1e-6;

/// Distortion coefficients. Layout of the 10-vector form:
/// `[k1, k2, k3, k4, k5, k6, p1, p2, s1, s2]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub k: [f64; 6],
    pub p: [f64; 2],
    pub s: [f64; 2],
}

impl Distortion {
    pub fn to_vec(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        out[..6].copy_from_slice(&self.k);
        out[6..8].copy_from_slice(&self.p);
        out[8..].copy_from_slice(&self.s);
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, CameraError> {
        if v.len() != 10 {
            return Err(CameraError::InvalidModel(format!(
                "distortion vector needs 10 entries, got {}",
                v.len()
            )));
        }
        let mut d = Distortion::default();
        d.k.copy_from_slice(&v[..6]);
        d.p.copy_from_slice(&v[6..8]);
        d.s.copy_from_slice(&v[8..]);
        Ok(d)
    }

    pub fn is_zero(&self) -> bool {
        self.to_vec().iter().all(|v| *v == 0.0)
    }

    /// Maps undistorted normalized coordinates to distorted ones.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, k3, k4, k5, k6] = self.k;
        let [p1, p2] = self.p;
        let [s1, s2] = self.s;
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let radial = (1.0 + k1 * r2 + k2 * r4 + k3 * r6) / (1.0 + k4 * r2 + k5 * r4 + k6 * r6);
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x) + s1 * r2;
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y + s2 * r2;
        (xd, yd)
    }

    /// Fixed-point inversion of [`Distortion::apply`].
    pub fn remove(&self, xd: f64, yd: f64) -> (f64, f64) {
        if self.is_zero() {
            return (xd, yd);
        }
        let [k1, k2, k3, k4, k5, k6] = self.k;
        let [p1, p2] = self.p;
        let [s1, s2] = self.s;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..50 {
            let r2 = x * x + y * y;
            let r4 = r2 * r2;
            let r6 = r4 * r2;
            let radial = (1.0 + k1 * r2 + k2 * r4 + k3 * r6) / (1.0 + k4 * r2 + k5 * r4 + k6 * r6);
            let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x) + s1 * r2;
            let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y + s2 * r2;
            let nx = (xd - dx) / radial;
            let ny = (yd - dy) / radial;
            let step = (nx - x).abs().max((ny - y).abs());
            x = nx;
            y = ny;
            if step < 1e-15 {
                break;
            }
        }
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
    #[serde(default)]
    pub distortion: Distortion,
}

impl CameraModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            skew: 0.0,
            distortion: Distortion::default(),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidModel(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel of a point already expressed in the camera frame.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if p.z <= MIN_DEPTH {
            return Err(CameraError::BehindCamera(p.z));
        }
        let (xd, yd) = self.distortion.apply(p.x / p.z, p.y / p.z);
        Ok(Vector2::new(
            self.fx * xd + self.skew * yd + self.cx,
            self.fy * yd + self.cy,
        ))
    }

    /// Pixel → normalized, undistorted image-plane coordinates.
    pub fn normalize_pixel(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        let yd = (uv.y - self.cy) / self.fy;
        let xd = (uv.x - self.cx - self.skew * yd) / self.fx;
        let (x, y) = self.distortion.remove(xd, yd);
        Vector2::new(x, y)
    }
}

/// Projects `point_t` (target frame) through `pose_ct` and the camera.
pub fn project(
    cam: &CameraModel,
    pose_ct: &RigidTransform,
    point_t: &Vector3<f64>,
) -> Result<Vector2<f64>, CameraError> {
    cam.project_camera_point(&pose_ct.transform_point(point_t))
}

/// `[[X, Y, 0], [u, v]]`: a plane point (mm) and its observed pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence(pub [f64; 3], pub [f64; 2]);

impl Correspondence {
    pub fn plane(&self) -> Vector2<f64> {
        Vector2::new(self.0[0], self.0[1])
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.1[0], self.1[1])
    }
}

/// Checkerboard inner-corner grid, centered on the target origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarTarget {
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
    pub points: Vec<[f64; 3]>,
}

impl PlanarTarget {
    pub fn checkerboard(rows: usize, cols: usize, pitch: f64) -> Self {
        let ox = 0.5 * (cols as f64 - 1.0) * pitch;
        let oy = 0.5 * (rows as f64 - 1.0) * pitch;
        let points = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| [c as f64 * pitch - ox, r as f64 * pitch - oy, 0.0]))
            .collect();
        Self {
            rows,
            cols,
            pitch,
            points,
        }
    }
}

/// Synthesizes a corner "detection": projects every target corner through the
/// ground-truth camera, optionally adding iid Gaussian pixel noise.
pub fn synthesize_view<R: Rng + ?Sized>(
    cam: &CameraModel,
    pose_ct: &RigidTransform,
    target: &PlanarTarget,
    noise_sigma_px: f64,
    rng: &mut R,
) -> Result<Vec<Correspondence>, CameraError> {
    let noise = (noise_sigma_px > 0.0).then(|| Normal::new(0.0, noise_sigma_px).unwrap());
    target
        .points
        .iter()
        .map(|p| {
            let mut uv = project(cam, pose_ct, &Vector3::from(*p))?;
            if let Some(n) = &noise {
                uv.x += n.sample(rng);
                uv.y += n.sample(rng);
            }
            Ok(Correspondence(*p, [uv.x, uv.y]))
        })
        .collect()
}

/// Similarity transform moving points to zero mean and mean distance √2.
fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(v.x / v.z, v.y / v.z)
}

/// Null vector of `a` plus the ratio `σ_{n-2}/σ_0` used to flag rank loss.
fn null_vector(a: DMatrix<f64>) -> (Vec<f64>, f64) {
    let ncols = a.ncols();
    let a = if a.nrows() < ncols {
        let mut padded = DMatrix::zeros(ncols, ncols);
        padded.view_mut((0, 0), (a.nrows(), ncols)).copy_from(&a);
        padded
    } else {
        a
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let smallest = order[ncols - 1];
    let second = order[ncols - 2];
    let ratio = if sv[order[0]] > 0.0 {
        sv[second] / sv[order[0]]
    } else {
        0.0
    };
    (v_t.row(smallest).iter().copied().collect(), ratio)
}

fn homography_from_points(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
) -> Result<Matrix3<f64>, CameraError> {
    if src.len() < 4 || src.len() != dst.len() {
        return Err(CameraError::Degenerate(format!(
            "homography needs at least 4 correspondences, got {}",
            src.len()
        )));
    }
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = apply_h(&ts, s);
        let d = apply_h(&td, d);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let (h, ratio) = null_vector(a);
    if ratio < 1e-9 {
        return Err(CameraError::Degenerate(
            "design matrix is rank deficient (collinear points?)".into(),
        ));
    }
    let hn = Matrix3::from_row_slice(&h);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| CameraError::Degenerate("singular normalization".into()))?;
    let h = td_inv * hn * ts;
    if h[(2, 2)].abs() < 1e-300 {
        return Err(CameraError::Degenerate("H[2][2] vanishes".into()));
    }
    Ok(h / h[(2, 2)])
}

/// Normalized-DLT homography mapping plane points (mm) to pixels, scaled so
/// `H[2][2] = 1`.
pub fn estimate_homography(corr: &[Correspondence]) -> Result<Matrix3<f64>, CameraError> {
    let src: Vec<_> = corr.iter().map(Correspondence::plane).collect();
    let dst: Vec<_> = corr.iter().map(Correspondence::pixel).collect();
    homography_from_points(&src, &dst)
}

pub fn homography_rms(h: &Matrix3<f64>, corr: &[Correspondence]) -> f64 {
    let sum: f64 = corr
        .iter()
        .map(|c| (apply_h(h, &c.plane()) - c.pixel()).norm_squared())
        .sum();
    (sum / corr.len().max(1) as f64).sqrt()
}

fn zhang_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Closed-form intrinsics from ≥3 planar views with zero skew. Distortion
/// is left at zero.
pub fn calibrate_zhang(views: &[Vec<Correspondence>]) -> Result<CameraModel, CameraError> {
    if views.len() < 3 {
        return Err(CameraError::InsufficientViews {
            need: 3,
            got: views.len(),
        });
    }
    // Condition pixel coordinates over all views; N·K keeps zero skew.
    let all_px: Vec<_> = views.iter().flatten().map(Correspondence::pixel).collect();
    let norm = normalizing_transform(&all_px);
    let mut rows: Vec<[f64; 6]> = Vec::with_capacity(2 * views.len() + 1);
    for v in views {
        let h = norm * estimate_homography(v)?;
        let h = h / h.norm();
        rows.push(zhang_row(&h, 0, 1));
        let a = zhang_row(&h, 0, 0);
        let b = zhang_row(&h, 1, 1);
        rows.push(std::array::from_fn(|k| a[k] - b[k]));
    }
    rows.push([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let mut m = DMatrix::zeros(rows.len(), 6);
    for (r, row) in rows.iter().enumerate() {
        for c in 0..6 {
            m[(r, c)] = row[c];
        }
    }
    let (b, ratio) = null_vector(m);
    if ratio < 1e-9 {
        return Err(CameraError::Degenerate(
            "views do not constrain the intrinsics (near-parallel planes)".into(),
        ));
    }
    let [b11, b12, b22, b13, b23, b33] = [b[0], b[1], b[2], b[3], b[4], b[5]];
    let denom = b11 * b22 - b12 * b12;
    let degenerate = || CameraError::Degenerate("image of the absolute conic is not positive definite".into());
    if denom.abs() < 1e-300 || b11.abs() < 1e-300 {
        return Err(degenerate());
    }
    let v0 = (b12 * b13 - b11 * b23) / denom;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    let alpha2 = lambda / b11;
    let beta2 = lambda * b11 / denom;
    if !(alpha2 > 0.0 && beta2 > 0.0) {
        return Err(degenerate());
    }
    let alpha = alpha2.sqrt();
    let beta = beta2.sqrt();
    let u0 = -b13 * alpha2 / lambda;
    let kn = Matrix3::new(alpha, 0.0, u0, 0.0, beta, v0, 0.0, 0.0, 1.0);
    let k = norm.try_inverse().ok_or_else(degenerate)? * kn;
    let k = k / k[(2, 2)];
    CameraModel::pinhole(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)])
}

fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = u * d * v_t;
    }
    r
}

pub fn reprojection_rms(cam: &CameraModel, pose_ct: &RigidTransform, corr: &[Correspondence]) -> f64 {
    let mut sum = 0.0;
    for c in corr {
        match project(cam, pose_ct, &Vector3::from(c.0)) {
            Ok(uv) => sum += (uv - c.pixel()).norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    (sum / corr.len().max(1) as f64).sqrt()
}

/// Target pose `T_CT` from one view: homography decomposition in normalized
/// coordinates, then a short Levenberg–Marquardt polish of the reprojection
/// error.
pub fn estimate_target_pose(
    cam: &CameraModel,
    view: &[Correspondence],
) -> Result<RigidTransform, CameraError> {
    if view.len() < 4 {
        return Err(CameraError::Degenerate(format!(
            "pose needs at least 4 correspondences, got {}",
            view.len()
        )));
    }
    let src: Vec<_> = view.iter().map(Correspondence::plane).collect();
    let dst: Vec<_> = view.iter().map(|c| cam.normalize_pixel(&c.pixel())).collect();
    let h = homography_from_points(&src, &dst)?;
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let scale = 2.0 / (h1.norm() + h2.norm());
    let mut best: Option<RigidTransform> = None;
    for sign in [1.0, -1.0] {
        let l = sign * scale;
        let r1 = l * h1;
        let r2 = l * h2;
        let r3 = r1.cross(&r2);
        let mut r = Matrix3::zeros();
        r.set_column(0, &r1);
        r.set_column(1, &r2);
        r.set_column(2, &r3);
        let pose = RigidTransform::new(project_to_so3(&r), l * h3);
        let all_front = src
            .iter()
            .all(|p| pose.transform_point(&Vector3::new(p.x, p.y, 0.0)).z > MIN_DEPTH);
        if all_front {
            best = Some(pose);
            break;
        }
    }
    let pose = best.ok_or(CameraError::BehindCamera(f64::NAN))?;
    Ok(refine_pose(cam, pose, view))
}

fn pose_from_params(base: &RigidTransform, p: &[f64; 6]) -> RigidTransform {
    let w = Vector3::new(p[0], p[1], p[2]);
    let angle = w.norm();
    let dr = crate::geometry::axis_angle_matrix(w, angle);
    RigidTransform::new(
        dr * base.rotation,
        base.translation + Vector3::new(p[3], p[4], p[5]),
    )
}

fn residuals(cam: &CameraModel, pose: &RigidTransform, view: &[Correspondence]) -> Option<Vec<f64>> {
    let mut r = Vec::with_capacity(2 * view.len());
    for c in view {
        let uv = project(cam, pose, &Vector3::from(c.0)).ok()?;
        r.push(uv.x - c.1[0]);
        r.push(uv.y - c.1[1]);
    }
    Some(r)
}

fn refine_pose(cam: &CameraModel, mut pose: RigidTransform, view: &[Correspondence]) -> RigidTransform {
    let Some(mut res) = residuals(cam, &pose, view) else {
        return pose;
    };
    let mut cost: f64 = res.iter().map(|v| v * v).sum();
    let mut mu = 1e-3;
    for _ in 0..20 {
        if cost < 1e-24 {
            break;
        }
        // Central-difference Jacobian in the local tangent parameterization.
        let n = res.len();
        let mut jac = DMatrix::zeros(n, 6);
        for k in 0..6 {
            let h = if k < 3 { 1e-7 } else { 1e-5 };
            let mut pp = [0.0; 6];
            pp[k] = h;
            let mut pm = [0.0; 6];
            pm[k] = -h;
            let (Some(rp), Some(rm)) = (
                residuals(cam, &pose_from_params(&pose, &pp), view),
                residuals(cam, &pose_from_params(&pose, &pm), view),
            ) else {
                return pose;
            };
            for i in 0..n {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let r = nalgebra::DVector::from_vec(res.clone());
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * r;
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for d in 0..6 {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-&jtr)) else {
                break;
            };
            let p: [f64; 6] = std::array::from_fn(|k| delta[k]);
            let cand = pose_from_params(&pose, &p);
            if let Some(cr) = residuals(cam, &cand, view) {
                let cc: f64 = cr.iter().map(|v| v * v).sum();
                if cc < cost {
                    pose = cand;
                    res = cr;
                    cost = cc;
                    mu = (mu * 0.3).max(1e-12);
                    improved = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}
