//! Quasi-static gel contact and tri-colour photometric rendering.
//!
//! The sensor frame has the gel surface in the plane `z = 0` with the
//! outward gel normal along `+z`. A phantom is placed above the gel with its
//! top face pointing down; pressing it in means translating it along `-z`.
//! Each window cell is an independent tissue spring in series with a gel
//! spring, so the force is a sum of per-cell terms.

use std::io::{self, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_angle_matrix, RigidTransform};
use crate::image::RgbImage;
use crate::phantom::{PhantomSpec, MAX_HEIGHT_MM};

/// Hard ceiling on the commanded contact force.
pub const MAX_FORCE_N: f64 = 3.0;
/// Distance from the gel plane to the phantom backing plate before plunging.
pub const STANDOFF_MM: f64 = MAX_HEIGHT_MM + 1.0;
/// Largest tilt between the phantom normal and the gel normal.
pub const MAX_TILT_RAD: f64 = std::f64::consts::PI / 6.0;

const MARCH_STEP_MM: f64 = 0.1;
const REFINE_ITERS: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TactileError {
    #[error("no contact: {0}")]
    NoContact(String),
    #[error("invalid sensor config: {0}")]
    InvalidConfig(String),
    #[error("pose tilt {0:.2}° exceeds 30°")]
    ExcessiveTilt(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// Sensing extent `[u, v]` in mm.
    pub window_mm: [f64; 2],
    /// Output `[width, height]` in pixels; one deformation cell per pixel.
    pub resolution: [usize; 2],
    /// Gel stiffness per unit area, N/mm per mm².
    pub k_gel: f64,
    /// Unit light directions for the R, G and B channels.
    pub led_directions: [[f64; 3]; 3],
    pub led_intensity: f64,
    pub ambient: f64,
    pub force_target: f64,
    pub smoothing_sigma_mm: f64,
    pub travel_limit_mm: f64,
    /// Lower edge of the accepted force band as a fraction of the target.
    pub force_band: f64,
    pub max_bisections: usize,
}

pub fn led_direction(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            window_mm: [20.0, 20.0],
            resolution: [256, 256],
            k_gel: 0.05,
            led_directions: [
                led_direction(0.0, 45.0),
                led_direction(120.0, 45.0),
                led_direction(240.0, 45.0),
            ],
            led_intensity: 0.65,
            ambient: 0.25,
            force_target: 3.0,
            smoothing_sigma_mm: 0.4,
            travel_limit_mm: 15.0,
            force_band: 0.98,
            max_bisections: 60,
        }
    }
}

impl SensorConfig {
    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.resolution = [width, height];
        self
    }

    pub fn validate(&self) -> Result<(), TactileError> {
        let bad = |m: String| Err(TactileError::InvalidConfig(m));
        if !(self.force_target > 0.0 && self.force_target <= MAX_FORCE_N) {
            return bad(format!("force_target {} outside (0, 3] N", self.force_target));
        }
        if self.resolution[0] < 16 || self.resolution[1] < 16 {
            return bad(format!("resolution {:?} below 16×16", self.resolution));
        }
        if !(self.window_mm[0] > 0.0 && self.window_mm[1] > 0.0) {
            return bad(format!("window {:?} must be positive", self.window_mm));
        }
        if !(self.k_gel > 0.0) {
            return bad(format!("k_gel {} must be positive", self.k_gel));
        }
        for (c, l) in self.led_directions.iter().enumerate() {
            let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 || l[2] <= 0.0 {
                return bad(format!("led {c} must be unit-norm with positive z"));
            }
        }
        for (name, v) in [("led_intensity", self.led_intensity), ("ambient", self.ambient)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.smoothing_sigma_mm >= 0.0) || !(self.travel_limit_mm > 0.0) {
            return bad("smoothing sigma and travel limit must be non-negative".into());
        }
        if !(self.force_band > 0.0 && self.force_band <= 1.0) || self.max_bisections == 0 {
            return bad("force band must lie in (0, 1] with at least one bisection".into());
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    pub fn pitch(&self) -> (f64, f64) {
        (
            self.window_mm[0] / self.resolution[0] as f64,
            self.window_mm[1] / self.resolution[1] as f64,
        )
    }

    pub fn cell_area(&self) -> f64 {
        let (pu, pv) = self.pitch();
        pu * pv
    }

    /// Center of cell `(row, col)` in the gel plane, window centered on the axis.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (pu, pv) = self.pitch();
        (
            (col as f64 + 0.5) * pu - 0.5 * self.window_mm[0],
            (row as f64 + 0.5) * pv - 0.5 * self.window_mm[1],
        )
    }
}

/// Pose that faces the phantom down onto the gel with phantom point
/// `(center, 0)` on the sensor axis at `STANDOFF_MM`.
///
/// `spin` rotates about the gel normal; the phantom normal is then tipped by
/// `tilt` toward azimuth `tilt_dir` (all radians).
pub fn contact_pose(center: [f64; 2], spin: f64, tilt_dir: f64, tilt: f64) -> RigidTransform {
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let axis = Vector3::new(-tilt_dir.sin(), tilt_dir.cos(), 0.0);
    let r_tilt = if tilt == 0.0 {
        Matrix3::identity()
    } else {
        axis_angle_matrix(axis, tilt)
    };
    let r_spin = if spin == 0.0 {
        Matrix3::identity()
    } else {
        axis_angle_matrix(Vector3::z(), spin)
    };
    let r = r_tilt * r_spin * flip;
    let t = Vector3::new(0.0, 0.0, STANDOFF_MM) - r * Vector3::new(center[0], center[1], 0.0);
    RigidTransform {
        rotation: r,
        translation: t,
    }
}

/// Angle between the phantom's outward normal and the inward gel normal.
pub fn pose_tilt(pose: &RigidTransform) -> f64 {
    let n = pose.rotation * Vector3::z();
    (-n.z).clamp(-1.0, 1.0).acos()
}

/// Per-cell gap (sensor `z` of the first phantom surface along the cell's
/// axis) and tissue stiffness at that point; `gap = +∞` where the axis misses.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactGeometry {
    pub gaps: Vec<f64>,
    pub stiffness: Vec<f64>,
    pub k_gel: f64,
    pub cell_area: f64,
}

impl ContactGeometry {
    pub fn first_contact(&self) -> Option<f64> {
        self.gaps
            .iter()
            .copied()
            .filter(|g| g.is_finite())
            .reduce(f64::min)
    }

    pub fn effective_stiffness(&self, cell: usize) -> f64 {
        let k = self.stiffness[cell];
        k * self.k_gel / (k + self.k_gel)
    }

    pub fn penetration(&self, cell: usize, depth: f64) -> f64 {
        (depth - self.gaps[cell]).max(0.0)
    }

    /// Total reaction force with the phantom pushed `depth` mm toward the gel.
    pub fn force_at(&self, depth: f64) -> f64 {
        let sum: f64 = (0..self.gaps.len())
            .filter(|&c| self.gaps[c] < depth)
            .map(|c| self.effective_stiffness(c) * (depth - self.gaps[c]))
            .sum();
        sum * self.cell_area
    }
}

/// Ray-march every cell axis into the phantom surface.
pub fn contact_geometry(
    spec: &PhantomSpec,
    pose: &RigidTransform,
    cfg: &SensorConfig,
) -> Result<ContactGeometry, TactileError> {
    cfg.validate()?;
    let tilt = pose_tilt(pose);
    if tilt > MAX_TILT_RAD + 1e-9 {
        return Err(TactileError::ExcessiveTilt(tilt.to_degrees()));
    }
    let inv = pose.inverse();
    let dir = inv.transform_vector(&Vector3::z());
    // Fixed absolute levels so the result only depends on the surface the
    // rays actually cross.
    let top_level = ((spec.max_height() + MARCH_STEP_MM) / MARCH_STEP_MM).ceil() as i64;
    let [w, h] = cfg.resolution;
    let mut gaps = vec![f64::INFINITY; w * h];
    let mut stiffness = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let (u, v) = cfg.cell_center(row, col);
            let p0 = inv.transform_point(&Vector3::new(u, v, 0.0));
            if let Some((gap, k)) = march(spec, &p0, &dir, top_level) {
                gaps[row * w + col] = gap;
                stiffness[row * w + col] = k;
            }
        }
    }
    Ok(ContactGeometry {
        gaps,
        stiffness,
        k_gel: cfg.k_gel,
        cell_area: cfg.cell_area(),
    })
}

/// Walk phantom height `s` downward along the axis `p0 + z·dir`.
fn march(spec: &PhantomSpec, p0: &Vector3<f64>, dir: &Vector3<f64>, top: i64) -> Option<(f64, f64)> {
    let at = |s: f64| {
        let z = (s - p0.z) / dir.z;
        (z, p0.x + z * dir.x, p0.y + z * dir.y)
    };
    let solid = |s: f64| {
        let (_, x, y) = at(s);
        spec.contains(x, y) && s <= spec.sample_unchecked(x, y).0
    };
    let mut level = top;
    while level >= 0 {
        let s = level as f64 * MARCH_STEP_MM;
        if solid(s) {
            let (mut lo, mut hi) = (s, s + MARCH_STEP_MM);
            for _ in 0..REFINE_ITERS {
                let mid = 0.5 * (lo + hi);
                if solid(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (z, x, y) = at(lo);
            return Some((z, spec.sample_unchecked(x, y).1));
        }
        level -= 1;
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactState {
    /// Tissue-plus-gel penetration per cell (mm).
    pub penetration: Vec<f64>,
    /// Gel-side share of the penetration; this is what the camera sees.
    pub deformation: Vec<f64>,
    pub achieved_force: f64,
    /// Plunge from the initial pose along `-z`.
    pub depth: f64,
    pub first_contact: f64,
    pub contact_fraction: f64,
}

/// Bisect the plunge depth until the force lands in the accepted band.
pub fn settle_contact(
    spec: &PhantomSpec,
    pose: &RigidTransform,
    cfg: &SensorConfig,
) -> Result<ContactState, TactileError> {
    let geom = contact_geometry(spec, pose, cfg)?;
    settle_geometry(&geom, cfg)
}

pub fn settle_geometry(geom: &ContactGeometry, cfg: &SensorConfig) -> Result<ContactState, TactileError> {
    let first = geom
        .first_contact()
        .ok_or_else(|| TactileError::NoContact("no cell axis meets the phantom".into()))?;
    let target = cfg.force_target;
    let floor = cfg.force_band * target;
    let (mut lo, mut hi) = (first, first + cfg.travel_limit_mm);
    let f_max = geom.force_at(hi);
    if f_max == 0.0 {
        return Err(TactileError::NoContact("zero force at the travel limit".into()));
    }
    if f_max < floor {
        return Err(TactileError::NoContact(format!(
            "only {f_max:.3} N reachable within {} mm travel",
            cfg.travel_limit_mm
        )));
    }
    let mut depth = None;
    for _ in 0..cfg.max_bisections {
        let mid = 0.5 * (lo + hi);
        let f = geom.force_at(mid);
        if f > target {
            hi = mid;
        } else if f < floor {
            lo = mid;
        } else {
            depth = Some(mid);
            break;
        }
    }
    // `lo` always satisfies F ≤ target, so the budget holds even if the
    // band was not hit.
    let depth = depth.unwrap_or(lo);
    let n = geom.gaps.len();
    let penetration: Vec<f64> = (0..n).map(|c| geom.penetration(c, depth)).collect();
    let deformation: Vec<f64> = (0..n)
        .map(|c| {
            let k = geom.stiffness[c];
            if penetration[c] > 0.0 {
                penetration[c] * k / (k + geom.k_gel)
            } else {
                0.0
            }
        })
        .collect();
    let touching = penetration.iter().filter(|&&p| p > 0.0).count();
    Ok(ContactState {
        achieved_force: geom.force_at(depth),
        depth,
        first_contact: first,
        contact_fraction: touching as f64 / n as f64,
        penetration,
        deformation,
    })
}

fn gaussian_kernel(sigma_px: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_px).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma_px).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_rows(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * row[xx]
                })
                .sum();
        }
    }
    out
}

fn transpose(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = src[y * w + x];
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders; `sigma` in pixels per axis.
pub fn gaussian_smooth(field: &[f64], w: usize, h: usize, sigma_x: f64, sigma_y: f64) -> Vec<f64> {
    let mut out = field.to_vec();
    if sigma_x > 0.0 {
        out = convolve_rows(&out, w, h, &gaussian_kernel(sigma_x));
    }
    if sigma_y > 0.0 {
        let t = transpose(&out, w, h);
        out = transpose(&convolve_rows(&t, h, w, &gaussian_kernel(sigma_y)), h, w);
    }
    out
}

/// Central differences inside, one-sided on the border; returns `(∂/∂u, ∂/∂v)`.
pub fn gradient(field: &[f64], w: usize, h: usize, pu: f64, pv: f64) -> (Vec<f64>, Vec<f64>) {
    let at = |x: usize, y: usize| field[y * w + x];
    let diff = |a: f64, b: f64, span: usize, p: f64| (b - a) / (span as f64 * p);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = diff(at(x0, y), at(x1, y), x1 - x0, pu);
            gy[y * w + x] = diff(at(x, y0), at(x, y1), y1 - y0, pv);
        }
    }
    (gx, gy)
}

/// Unclamped per-channel shading of a deformation field.
pub fn shade(deformation: &[f64], cfg: &SensorConfig) -> Vec<[f64; 3]> {
    let [w, h] = cfg.resolution;
    assert_eq!(deformation.len(), w * h, "deformation does not match resolution");
    let (pu, pv) = cfg.pitch();
    let smooth = gaussian_smooth(
        deformation,
        w,
        h,
        cfg.smoothing_sigma_mm / pu,
        cfg.smoothing_sigma_mm / pv,
    );
    let (gx, gy) = gradient(&smooth, w, h, pu, pv);
    (0..w * h)
        .map(|i| {
            // The membrane bulges toward the internal camera by the local
            // deformation, so the surface is z = δ(u, v).
            let n = Vector3::new(-gx[i], -gy[i], 1.0).normalize();
            let mut px = [0.0; 3];
            for (c, l) in cfg.led_directions.iter().enumerate() {
                let lambert = (n.x * l[0] + n.y * l[1] + n.z * l[2]).max(0.0);
                px[c] = cfg.ambient + cfg.led_intensity * lambert;
            }
            px
        })
        .collect()
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn render_image(deformation: &[f64], cfg: &SensorConfig) -> RgbImage {
    let [w, h] = cfg.resolution;
    let shaded = shade(deformation, cfg);
    let mut img = RgbImage::new(w, h);
    for (i, px) in shaded.iter().enumerate() {
        img.data[i * 3..i * 3 + 3].copy_from_slice(&px.map(to_byte));
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct TactileFrame {
    pub width: usize,
    pub height: usize,
    /// Gel indentation per cell (mm), row-major.
    pub deformation: Vec<f64>,
    pub image: RgbImage,
    pub achieved_force: f64,
    /// Phantom→sensor pose after the plunge.
    pub pose_used: RigidTransform,
    pub contact_fraction: f64,
    pub plunge_depth: f64,
}

impl TactileFrame {
    /// Raw little-endian f32 dump of the deformation, for inspection.
    pub fn write_deformation_f32(&self, w: &mut impl Write) -> io::Result<()> {
        for v in &self.deformation {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

pub fn capture(
    spec: &PhantomSpec,
    pose: &RigidTransform,
    cfg: &SensorConfig,
) -> Result<TactileFrame, TactileError> {
    let state = settle_contact(spec, pose, cfg)?;
    let image = render_image(&state.deformation, cfg);
    let pose_used = RigidTransform::from_translation(0.0, 0.0, -state.depth).compose(pose);
    Ok(TactileFrame {
        width: cfg.resolution[0],
        height: cfg.resolution[1],
        deformation: state.deformation,
        image,
        achieved_force: state.achieved_force,
        pose_used,
        contact_fraction: state.contact_fraction,
        plunge_depth: state.depth,
    })
}
