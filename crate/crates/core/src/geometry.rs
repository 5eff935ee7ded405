//! Rigid-body transforms and the workcell frame graph.
//!
//! Convention: a transform `T_ab` maps coordinates expressed in frame `b`
//! into frame `a`, so `T_ac = T_ab * T_bc`. All translations are in
//! millimeters.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("no path between frames {0} and {1}")]
    NoPath(String, String),
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
}

const ORTHO_GUARD: f64 = 1e-12;

/// Proper rigid transform: orthonormal rotation plus translation (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, projecting `rotation` onto SO(3) when it has
    /// drifted from orthonormality.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut t = Self {
            rotation,
            translation,
        };
        t.reorthonormalize();
        t
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation(axis_angle_matrix(axis, angle))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        out.reorthonormalize();
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Accepts a homogeneous matrix whose rotation block is orthonormal
    /// within `1e-6` and last row is `(0,0,0,1)`.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::NotRigid(format!(
                "last row {last:?} is not (0,0,0,1)"
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() < 0.0 {
            return Err(GeometryError::NotRigid(format!(
                "rotation block deviates from SO(3) by {err:e}"
            )));
        }
        Ok(Self::new(r, m.fixed_view::<3, 1>(0, 3).into_owned()))
    }

    /// Row-major 4×4 homogeneous form, the on-disk transform layout.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Self, GeometryError> {
        Self::from_homogeneous(&Matrix4::from_row_slice(v))
    }

    /// Geodesic rotation angle (radians) of the rotation part.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max()
    }

    /// Polar-style correction `R ← (R + R⁻ᵀ)/2`, applied only when the
    /// rotation has drifted.
    pub fn reorthonormalize(&mut self) {
        for _ in 0..8 {
            if self.orthonormality_error() <= ORTHO_GUARD {
                break;
            }
            match self.rotation.try_inverse() {
                Some(inv) => self.rotation = 0.5 * (self.rotation + inv.transpose()),
                None => break,
            }
        }
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = <[f64; 16]>::deserialize(deserializer)?;
        RigidTransform::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

pub fn axis_angle_matrix(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let (s, c) = angle.sin_cos();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + s * kx + (1.0 - c) * (kx * kx)
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // atan2 form stays accurate near 0 and π.
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * skew.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Unit quaternion `w + xi + yj + zk` in canonical form (`w ≥ 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Normalizes and canonicalizes. Returns `None` for a zero vector.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(Self::from_array_raw([w / n, x / n, y / n, z / n]).canonical())
    }

    fn from_array_raw(a: [f64; 4]) -> Self {
        Self {
            w: a[0],
            x: a[1],
            y: a[2],
            z: a[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Option<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Representative with `w ≥ 0`; on `w == 0` the first nonzero
    /// component is made positive so the choice is unique.
    pub fn canonical(self) -> Self {
        let a = self.to_array();
        let flip = match a.iter().find(|v| **v != 0.0) {
            Some(v) if a[0] == 0.0 => *v < 0.0,
            _ => a[0] < 0.0,
        };
        if flip {
            Self::from_array_raw([-a[0], -a[1], -a[2], -a[3]])
        } else {
            self
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method: picks the numerically largest component first.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m.trace();
        let d = [tr, m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        let mut best = 0;
        for i in 1..4 {
            if d[i] > d[best] {
                best = i;
            }
        }
        let q = match best {
            0 => {
                let s = (1.0 + tr).sqrt() * 2.0;
                [
                    0.25 * s,
                    (m[(2, 1)] - m[(1, 2)]) / s,
                    (m[(0, 2)] - m[(2, 0)]) / s,
                    (m[(1, 0)] - m[(0, 1)]) / s,
                ]
            }
            1 => {
                let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
                [
                    (m[(2, 1)] - m[(1, 2)]) / s,
                    0.25 * s,
                    (m[(0, 1)] + m[(1, 0)]) / s,
                    (m[(0, 2)] + m[(2, 0)]) / s,
                ]
            }
            2 => {
                let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
                [
                    (m[(0, 2)] - m[(2, 0)]) / s,
                    (m[(0, 1)] + m[(1, 0)]) / s,
                    0.25 * s,
                    (m[(1, 2)] + m[(2, 1)]) / s,
                ]
            }
            _ => {
                let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
                [
                    (m[(1, 0)] - m[(0, 1)]) / s,
                    (m[(0, 2)] + m[(2, 0)]) / s,
                    (m[(1, 2)] + m[(2, 1)]) / s,
                    0.25 * s,
                ]
            }
        };
        Self::new(q[0], q[1], q[2], q[3]).unwrap_or_else(Self::identity)
    }

    /// Hamilton product `self ⊗ other`.
    pub fn mul(&self, o: &Self) -> [f64; 4] {
        let (a1, b1, c1, d1) = (self.w, self.x, self.y, self.z);
        let (a2, b2, c2, d2) = (o.w, o.x, o.y, o.z);
        [
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ]
    }
}

/// matrix → quaternion of quaternion → matrix.
pub fn quat_matrix_roundtrip(q: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::from_matrix(&q.to_matrix())
}

/// Opaque frame identifier ("R", "B", "C", "T", "H", or any scratch name).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameId(pub String);

impl FrameId {
    pub fn new(name: impl Into<String>) -> Self {
        FrameId(name.into())
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FrameId {
    fn from(s: &str) -> Self {
        FrameId(s.to_string())
    }
}

/// Undirected network of frames; each stored edge `(a, b)` carries `T_ab`
/// and implies `(b, a)` with the inverse.
#[derive(Debug, Clone, Default)]
pub struct FrameGraph {
    adjacency: HashMap<FrameId, Vec<(FrameId, RigidTransform)>>,
}

impl FrameGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_frame(&mut self, frame: impl Into<FrameId>) {
        self.adjacency.entry(frame.into()).or_default();
    }

    /// Inserts `T_from_to`. Replaces any existing edge between the pair.
    pub fn add_edge(
        &mut self,
        from: impl Into<FrameId>,
        to: impl Into<FrameId>,
        t_from_to: RigidTransform,
    ) {
        let (from, to) = (from.into(), to.into());
        self.remove_edge(&from, &to);
        self.adjacency
            .entry(from.clone())
            .or_default()
            .push((to.clone(), t_from_to));
        self.adjacency
            .entry(to)
            .or_default()
            .push((from, t_from_to.inverse()));
    }

    fn remove_edge(&mut self, a: &FrameId, b: &FrameId) {
        if let Some(v) = self.adjacency.get_mut(a) {
            v.retain(|(n, _)| n != b);
        }
        if let Some(v) = self.adjacency.get_mut(b) {
            v.retain(|(n, _)| n != a);
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameId> {
        self.adjacency.keys()
    }

    pub fn contains(&self, frame: &FrameId) -> bool {
        self.adjacency.contains_key(frame)
    }

    /// `T_from_to` along the shortest (fewest edges) path. Neighbors are
    /// explored in name order so the chosen path is deterministic.
    pub fn resolve(&self, from: &str, to: &str) -> Result<RigidTransform, GeometryError> {
        let (from_id, to_id) = (FrameId::new(from), FrameId::new(to));
        let no_path = || GeometryError::NoPath(from.to_string(), to.to_string());
        if from_id == to_id {
            return if self.contains(&from_id) {
                Ok(RigidTransform::identity())
            } else {
                Err(no_path())
            };
        }
        if !self.contains(&from_id) || !self.contains(&to_id) {
            return Err(no_path());
        }
        let mut prev: HashMap<FrameId, (FrameId, RigidTransform)> = HashMap::new();
        let mut queue = VecDeque::from([from_id.clone()]);
        let mut seen = std::collections::HashSet::from([from_id.clone()]);
        while let Some(cur) = queue.pop_front() {
            if cur == to_id {
                break;
            }
            let mut nbrs: Vec<&(FrameId, RigidTransform)> = self.adjacency[&cur].iter().collect();
            nbrs.sort_by(|a, b| a.0.cmp(&b.0));
            for (n, t) in nbrs {
                if seen.insert(n.clone()) {
                    prev.insert(n.clone(), (cur.clone(), *t));
                    queue.push_back(n.clone());
                }
            }
        }
        if !prev.contains_key(&to_id) {
            return Err(no_path());
        }
        // Walk back from `to`, accumulating T_from_to = T_from_x1 · … · T_xk_to.
        let mut chain = Vec::new();
        let mut cur = to_id;
        while cur != from_id {
            let (p, t) = prev[&cur].clone();
            chain.push(t);
            cur = p;
        }
        Ok(chain
            .iter()
            .rev()
            .fold(RigidTransform::identity(), |acc, t| acc.compose(t)))
    }

    /// Every simple path's composed transform between two frames, used to
    /// check consistency of a graph with cycles.
    pub fn all_path_transforms(&self, from: &str, to: &str) -> Vec<RigidTransform> {
        let (from, to) = (FrameId::new(from), FrameId::new(to));
        let mut out = Vec::new();
        let mut visited = vec![from.clone()];
        self.dfs_paths(&from, &to, RigidTransform::identity(), &mut visited, &mut out);
        out
    }

    fn dfs_paths(
        &self,
        cur: &FrameId,
        to: &FrameId,
        acc: RigidTransform,
        visited: &mut Vec<FrameId>,
        out: &mut Vec<RigidTransform>,
    ) {
        if cur == to {
            out.push(acc);
            return;
        }
        let Some(nbrs) = self.adjacency.get(cur) else {
            return;
        };
        let mut nbrs: Vec<_> = nbrs.iter().collect();
        nbrs.sort_by(|a, b| a.0.cmp(&b.0));
        for (n, t) in nbrs {
            if visited.contains(n) {
                continue;
            }
            visited.push(n.clone());
            self.dfs_paths(n, to, acc.compose(t), visited, out);
            visited.pop();
        }
    }
}

/// Maximum entrywise difference of two transforms' homogeneous forms.
pub fn max_abs_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.to_homogeneous() - b.to_homogeneous()).abs().max()
}

/// Rotation geodesic distance (rad) and translation distance (mm).
pub fn pose_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let rot = rotation_angle(&(a.rotation.transpose() * b.rotation));
    let trans = (a.translation - b.translation).norm();
    (rot, trans)
}
