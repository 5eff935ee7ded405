//! Procedural Borrmann type I–IV tumor phantoms.
//!
//! A phantom is a height field (mm above the rigid backplate) plus a
//! per-cell contact stiffness over a 30 mm × 30 mm working area. Shapes come
//! from four seeded templates; the tumor region is printed in a stiffer
//! material than the surrounding mucosa.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_from_seed, Rng, SeedPart};

/// Side of the square working area (mm).
pub const EXTENT_MM: f64 = 30.0;
pub const MAX_HEIGHT_MM: f64 = 12.0;
pub const BASE_LAYER_MM: f64 = 1.5;
pub const RIPPLE_MAX_MM: f64 = 0.15;
/// Healthy mucosa stiffness (N/mm per mm²).
pub const K_HEALTHY: f64 = 0.02;
/// Tumor stiffness (N/mm per mm²).
pub const K_TUMOR: f64 = 0.20;
pub const DEFAULT_GRID: usize = 128;
pub const PHANTOMS_PER_CLASS: usize = 11;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("query ({0:.3}, {1:.3}) mm is outside the working area")]
    OutOfBounds(f64, f64),
    #[error("unknown Borrmann class {0:?}")]
    UnknownClass(String),
    #[error("grid must be at least 2×2, got {0}×{1}")]
    BadGrid(usize, usize),
    #[error("phantom file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BorrmannClass {
    I,
    II,
    III,
    IV,
}

impl BorrmannClass {
    pub const ALL: [BorrmannClass; 4] = [Self::I, Self::II, Self::III, Self::IV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        }
    }
}

impl fmt::Display for BorrmannClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BorrmannClass {
    type Err = PhantomError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" | "1" => Ok(Self::I),
            "II" | "2" => Ok(Self::II),
            "III" | "3" => Ok(Self::III),
            "IV" | "4" => Ok(Self::IV),
            _ => Err(PhantomError::UnknownClass(s.to_string())),
        }
    }
}

/// One planar sinusoid `(1 + sin(2π f (x cosθ + y sinθ) + φ)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub frequency: f64,
    pub direction: f64,
    pub phase: f64,
}

impl Wave {
    fn unit(&self, x: f64, y: f64) -> f64 {
        let s = x * self.direction.cos() + y * self.direction.sin();
        0.5 * (1.0 + (2.0 * PI * self.frequency * s + self.phase).sin())
    }
}

fn wave_sum(waves: &[Wave], x: f64, y: f64) -> f64 {
    waves.iter().map(|w| w.amplitude * w.unit(x, y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub angle: f64,
    pub distance: f64,
    pub radius: f64,
    pub rel_height: f64,
}

/// Crater core shared by types II and III for a given seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CraterCore {
    pub rim_radius: f64,
    pub rim_width: f64,
    pub rim_height: f64,
    pub floor_depth: f64,
}

impl CraterCore {
    pub fn inner_edge(&self) -> f64 {
        self.rim_radius - 0.5 * self.rim_width
    }

    pub fn outer_edge(&self) -> f64 {
        self.rim_radius + 0.5 * self.rim_width
    }

    const INNER_WALL_MM: f64 = 1.5;
    const RIM_CROWN_MM: f64 = 0.3;

    /// Height for `ρ ≤ outer_edge`.
    fn core_height(&self, rho: f64) -> f64 {
        let floor = BASE_LAYER_MM - self.floor_depth;
        let ri = self.inner_edge();
        if rho <= ri - Self::INNER_WALL_MM {
            floor
        } else if rho < ri {
            let s = (rho - (ri - Self::INNER_WALL_MM)) / Self::INNER_WALL_MM;
            let top = self.rim_top(ri);
            floor + (top - floor) * 0.5 * (1.0 - (PI * s).cos())
        } else {
            self.rim_top(rho)
        }
    }

    fn rim_top(&self, rho: f64) -> f64 {
        let u = (rho - self.rim_radius) / (0.5 * self.rim_width);
        self.rim_height - Self::RIM_CROWN_MM * u * u
    }
}

/// Margin profile outside the crater rim: 80 % of the rim elevation is lost
/// within `decay_80_mm`.
fn margin_height(core: &CraterCore, rho: f64, decay_80_mm: f64) -> f64 {
    let ro = core.outer_edge();
    let edge = core.rim_top(ro);
    let tau = decay_80_mm / 5f64.ln();
    BASE_LAYER_MM + (edge - BASE_LAYER_MM) * (-(rho - ro) / tau).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum ShapeParams {
    /// Polypoid dome: super-Gaussian mass lobulated by secondary bumps.
    Dome {
        peak_height: f64,
        radius: f64,
        lobes: Vec<Lobe>,
    },
    /// Crater with sharp raised rim; tumor is rim plus floor.
    SharpCrater { core: CraterCore, decay_80_mm: f64 },
    /// Crater whose margins are infiltrated: shallow falloff and a stiff
    /// region extending `extension(θ)` beyond the rim.
    InfiltratedCrater {
        core: CraterCore,
        decay_80_mm: f64,
        extension_mm: f64,
        boundary_waves: Vec<(f64, f64, f64)>,
    },
    /// Diffuse flat lesion: slight thickening with an irregular stiff patch.
    DiffuseFlat {
        undulation_mm: f64,
        field: Vec<Wave>,
        threshold: f64,
        coverage: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub center: [f64; 2],
    pub ripple: Vec<Wave>,
    pub shape: ShapeParams,
}

const DOME_EXPONENT: f64 = 4.0;
const DOME_FOOTPRINT: f64 = 0.05;

impl PhantomParams {
    /// Analytic template value at `(x, y)`: height (mm) and tumor membership.
    pub fn evaluate(&self, x: f64, y: f64) -> (f64, bool) {
        let ripple = wave_sum(&self.ripple, x, y);
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let rho = (dx * dx + dy * dy).sqrt();
        let (h, tumor) = match &self.shape {
            ShapeParams::Dome {
                peak_height,
                radius,
                lobes,
            } => {
                let lift = peak_height - BASE_LAYER_MM;
                let mut rel = (-(rho / radius).powf(DOME_EXPONENT)).exp();
                for l in lobes {
                    let lx = self.center[0] + l.distance * l.angle.cos();
                    let ly = self.center[1] + l.distance * l.angle.sin();
                    let d = ((x - lx).powi(2) + (y - ly).powi(2)).sqrt();
                    rel += l.rel_height * (-(d / l.radius).powf(DOME_EXPONENT)).exp();
                }
                (BASE_LAYER_MM + lift * rel, rel >= DOME_FOOTPRINT)
            }
            ShapeParams::SharpCrater { core, decay_80_mm } => {
                if rho <= core.outer_edge() {
                    (core.core_height(rho), true)
                } else {
                    (margin_height(core, rho, *decay_80_mm), false)
                }
            }
            ShapeParams::InfiltratedCrater {
                core,
                decay_80_mm,
                extension_mm,
                boundary_waves,
            } => {
                let theta = dy.atan2(dx);
                let ext = extension_mm
                    + boundary_waves
                        .iter()
                        .map(|&(a, k, ph)| a * (k * theta + ph).sin())
                        .sum::<f64>();
                let inside = rho <= core.outer_edge() + ext;
                if rho <= core.outer_edge() {
                    (core.core_height(rho), true)
                } else {
                    (margin_height(core, rho, *decay_80_mm), inside)
                }
            }
            ShapeParams::DiffuseFlat {
                undulation_mm,
                field,
                threshold,
                ..
            } => {
                let g = wave_sum(field, x, y);
                (BASE_LAYER_MM + undulation_mm * g, g >= *threshold)
            }
        };
        ((h + ripple).clamp(0.0, MAX_HEIGHT_MM), tumor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub phantom_id: String,
    pub borrmann_class: BorrmannClass,
    pub seed: u64,
    pub nh: usize,
    pub nw: usize,
    pub extent_mm: f64,
    pub k_healthy: f64,
    pub k_tumor: f64,
    pub params: PhantomParams,
    /// Row-major `nh × nw`, row `i` at `y = i·pitch`.
    #[serde(skip)]
    pub heights: Vec<f32>,
    #[serde(skip)]
    pub stiffness: Vec<f32>,
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

fn draw_waves(rng: &mut Rng, n: usize, total_amp: f64, freq: (f64, f64)) -> Vec<Wave> {
    let weights: Vec<f64> = (0..n).map(|_| uniform(rng, 0.5, 1.0)).collect();
    let sum: f64 = weights.iter().sum();
    weights
        .into_iter()
        .map(|w| Wave {
            amplitude: total_amp * w / sum,
            frequency: uniform(rng, freq.0, freq.1),
            direction: uniform(rng, 0.0, 2.0 * PI),
            phase: uniform(rng, 0.0, 2.0 * PI),
        })
        .collect()
}

/// Deterministic phantom for `(class, seed)` on an `n × n` grid.
pub fn generate_phantom(class: BorrmannClass, seed: u64) -> PhantomSpec {
    generate_phantom_with_grid(class, seed, DEFAULT_GRID, DEFAULT_GRID)
        .expect("default grid is valid")
}

pub fn generate_phantom_with_grid(
    class: BorrmannClass,
    seed: u64,
    nh: usize,
    nw: usize,
) -> Result<PhantomSpec, PhantomError> {
    if nh < 2 || nw < 2 {
        return Err(PhantomError::BadGrid(nh, nw));
    }
    let mut rng = rng_from_seed(seed);
    // Draw order is fixed so that types II and III share ripple, center and
    // crater core for the same seed.
    let ripple = draw_waves(&mut rng, 3, RIPPLE_MAX_MM, (0.3, 0.8));
    let center = [uniform(&mut rng, 13.0, 17.0), uniform(&mut rng, 13.0, 17.0)];
    let core = CraterCore {
        rim_radius: uniform(&mut rng, 6.0, 8.0),
        rim_width: uniform(&mut rng, 2.0, 3.0),
        rim_height: uniform(&mut rng, 3.0, 5.0),
        floor_depth: uniform(&mut rng, 0.5, 1.0),
    };
    let mut class_rng = rng_from_seed(derive_seed(&[
        SeedPart::Int(seed),
        SeedPart::Str(class.name()),
    ]));
    let r = &mut class_rng;
    let shape = match class {
        BorrmannClass::I => {
            let radius = uniform(r, 6.0, 10.0);
            let n_lobes = r.random_range(2..=4usize);
            let offset = uniform(r, 0.0, 2.0 * PI);
            let lobes = (0..n_lobes)
                .map(|k| Lobe {
                    angle: offset + 2.0 * PI * k as f64 / n_lobes as f64 + uniform(r, -0.3, 0.3),
                    distance: radius * uniform(r, 0.6, 0.85),
                    radius: radius * uniform(r, 0.2, 0.35),
                    rel_height: uniform(r, 0.15, 0.3),
                })
                .collect();
            ShapeParams::Dome {
                peak_height: uniform(r, 5.0, 9.0),
                radius,
                lobes,
            }
        }
        BorrmannClass::II => ShapeParams::SharpCrater {
            core,
            decay_80_mm: uniform(r, 1.0, 1.5),
        },
        BorrmannClass::III => {
            let n = 3;
            let amps: Vec<f64> = (0..n).map(|_| uniform(r, 0.1, 0.33)).collect();
            let boundary_waves = amps
                .into_iter()
                .enumerate()
                .map(|(k, a)| (a, (k + 2) as f64, uniform(r, 0.0, 2.0 * PI)))
                .collect();
            ShapeParams::InfiltratedCrater {
                core,
                decay_80_mm: uniform(r, 5.0, 8.0),
                extension_mm: uniform(r, 6.2, 7.0),
                boundary_waves,
            }
        }
        BorrmannClass::IV => ShapeParams::DiffuseFlat {
            undulation_mm: uniform(r, 0.3, 0.6),
            field: draw_waves(r, 5, 1.0, (0.03, 0.09)),
            threshold: 0.0,
            coverage: uniform(r, 0.62, 0.8),
        },
    };
    let mut params = PhantomParams {
        center,
        ripple,
        shape,
    };
    let pitch_x = EXTENT_MM / (nw - 1) as f64;
    let pitch_y = EXTENT_MM / (nh - 1) as f64;
    if let ShapeParams::DiffuseFlat {
        field,
        threshold,
        coverage,
        ..
    } = &mut params.shape
    {
        // Threshold at the grid quantile so the stiff patch covers exactly
        // `coverage` of the cells.
        let mut vals: Vec<f64> = (0..nh)
            .flat_map(|i| (0..nw).map(move |j| (i, j)))
            .map(|(i, j)| wave_sum(field, j as f64 * pitch_x, i as f64 * pitch_y))
            .collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let k = ((*coverage * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
        *threshold = vals[k - 1];
    }
    let mut heights = Vec::with_capacity(nh * nw);
    let mut stiffness = Vec::with_capacity(nh * nw);
    for i in 0..nh {
        for j in 0..nw {
            let (h, tumor) = params.evaluate(j as f64 * pitch_x, i as f64 * pitch_y);
            heights.push(h as f32);
            stiffness.push(if tumor { K_TUMOR } else { K_HEALTHY } as f32);
        }
    }
    Ok(PhantomSpec {
        phantom_id: format!("{}-s{seed:016x}", class.name()),
        borrmann_class: class,
        seed,
        nh,
        nw,
        extent_mm: EXTENT_MM,
        k_healthy: K_HEALTHY,
        k_tumor: K_TUMOR,
        params,
        heights,
        stiffness,
    })
}

impl PhantomSpec {
    pub fn pitch_x(&self) -> f64 {
        self.extent_mm / (self.nw - 1) as f64
    }

    pub fn pitch_y(&self) -> f64 {
        self.extent_mm / (self.nh - 1) as f64
    }

    pub fn height_at_node(&self, i: usize, j: usize) -> f64 {
        self.heights[i * self.nw + j] as f64
    }

    pub fn stiffness_at_node(&self, i: usize, j: usize) -> f64 {
        self.stiffness[i * self.nw + j] as f64
    }

    pub fn is_tumor_node(&self, i: usize, j: usize) -> bool {
        self.stiffness_at_node(i, j) >= 0.9 * self.k_tumor
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.extent_mm).contains(&x) && (0.0..=self.extent_mm).contains(&y)
    }

    /// Bilinear lookup of (height mm, stiffness) at `(x, y)` mm.
    pub fn sample_field(&self, x: f64, y: f64) -> Result<(f64, f64), PhantomError> {
        if !self.contains(x, y) {
            return Err(PhantomError::OutOfBounds(x, y));
        }
        Ok(self.sample_unchecked(x, y))
    }

    /// Bilinear lookup for a point already known to be inside the area.
    pub(crate) fn sample_unchecked(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = x / self.pitch_x();
        let fy = y / self.pitch_y();
        let j0 = (fx.floor() as usize).min(self.nw - 2);
        let i0 = (fy.floor() as usize).min(self.nh - 2);
        let tx = fx - j0 as f64;
        let ty = fy - i0 as f64;
        let lerp2 = |g: &[f32]| {
            let at = |i: usize, j: usize| g[i * self.nw + j] as f64;
            let top = at(i0, j0) * (1.0 - tx) + at(i0, j0 + 1) * tx;
            let bot = at(i0 + 1, j0) * (1.0 - tx) + at(i0 + 1, j0 + 1) * tx;
            top * (1.0 - ty) + bot * ty
        };
        (lerp2(&self.heights), lerp2(&self.stiffness))
    }

    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.contains(x, y).then(|| self.sample_unchecked(x, y).0)
    }

    pub fn mean_stiffness(&self, tumor: bool) -> Option<f64> {
        let vals: Vec<f64> = (0..self.nh)
            .flat_map(|i| (0..self.nw).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_tumor_node(i, j) == tumor)
            .map(|(i, j)| self.stiffness_at_node(i, j))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn tumor_fraction(&self) -> f64 {
        let n = (0..self.nh)
            .flat_map(|i| (0..self.nw).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_tumor_node(i, j))
            .count();
        n as f64 / (self.nh * self.nw) as f64
    }

    /// Overwrite both node fields from `f(x, y) -> (height, stiffness)`.
    /// Used to build synthetic fixtures that share a grid with real phantoms.
    pub fn set_fields(&mut self, f: impl Fn(f64, f64) -> (f64, f64)) {
        let (px, py) = (self.pitch_x(), self.pitch_y());
        for i in 0..self.nh {
            for j in 0..self.nw {
                let (h, k) = f(j as f64 * px, i as f64 * py);
                self.heights[i * self.nw + j] = h as f32;
                self.stiffness[i * self.nw + j] = k as f32;
            }
        }
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().fold(0.0f32, |a, &b| a.max(b)) as f64
    }

    /// JSON header line, then little-endian f32 heights and stiffness.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), PhantomError> {
        let header = serde_json::to_string(self)?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for v in self.heights.iter().chain(&self.stiffness) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, PhantomError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut spec: PhantomSpec = serde_json::from_str(line.trim_end())?;
        let n = spec.nh * spec.nw;
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf)
            .map_err(|e| PhantomError::Format(format!("truncated field blobs: {e}")))?;
        let floats: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        spec.heights = floats[..n].to_vec();
        spec.stiffness = floats[n..].to_vec();
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), PhantomError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PhantomError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub fn phantom_seed(master_seed: u64, class: BorrmannClass, index: usize) -> u64 {
    derive_seed(&[
        SeedPart::Int(master_seed),
        SeedPart::Str("phantom"),
        SeedPart::Str(class.name()),
        SeedPart::Int(index as u64),
    ])
}

/// 11 phantoms per class with ids `"{class}-{00..10}"`.
pub fn build_phantom_bank(master_seed: u64) -> Vec<PhantomSpec> {
    build_phantom_bank_with(master_seed, PHANTOMS_PER_CLASS, DEFAULT_GRID)
        .expect("default bank parameters are valid")
}

pub fn build_phantom_bank_with(
    master_seed: u64,
    per_class: usize,
    grid: usize,
) -> Result<Vec<PhantomSpec>, PhantomError> {
    let mut bank = Vec::with_capacity(4 * per_class);
    for class in BorrmannClass::ALL {
        for idx in 0..per_class {
            let seed = phantom_seed(master_seed, class, idx);
            let mut spec = generate_phantom_with_grid(class, seed, grid, grid)?;
            spec.phantom_id = format!("{}-{idx:02}", class.name());
            bank.push(spec);
        }
    }
    Ok(bank)
}

/// Radius (mm) of the crater rim's outer edge; `None` for non-crater
/// templates.
pub fn rim_outer_edge(params: &PhantomParams) -> Option<f64> {
    match &params.shape {
        ShapeParams::SharpCrater { core, .. } | ShapeParams::InfiltratedCrater { core, .. } => {
            Some(core.outer_edge())
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peak(spec: &PhantomSpec) -> f64 {
        match spec.params.shape {
            ShapeParams::Dome { peak_height, .. } => peak_height,
            _ => panic!("not a dome"),
        }
    }

    #[test]
    fn dome_center_height_matches_peak() {
        for s in 0..20 {
            let p = generate_phantom(BorrmannClass::I, s);
            let [cx, cy] = p.params.center;
            let (h, tumor) = p.params.evaluate(cx, cy);
            assert!(tumor);
            assert!((h - peak(&p)).abs() <= RIPPLE_MAX_MM + 1e-6);
            assert!(h >= 5.0);
            let (hb, kb) = p.sample_field(cx, cy).unwrap();
            assert!((hb - h).abs() < 0.02, "bilinear {hb} vs analytic {h}");
            assert_eq!(kb, K_TUMOR as f32 as f64);
        }
    }

    #[test]
    fn flat_type_height_range() {
        for s in 0..20 {
            let p = generate_phantom(BorrmannClass::IV, s);
            let (lo, hi) = p
                .heights
                .iter()
                .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            assert!((hi - lo) as f64 <= 0.8 + RIPPLE_MAX_MM);
            assert!(p.tumor_fraction() >= 0.6);
        }
    }

    #[test]
    fn crater_types_share_core_and_differ_at_margin() {
        for s in 0..20 {
            let two = generate_phantom(BorrmannClass::II, s);
            let three = generate_phantom(BorrmannClass::III, s);
            assert_eq!(two.params.center, three.params.center);
            let ro = rim_outer_edge(&two.params).unwrap();
            assert_eq!(Some(ro), rim_outer_edge(&three.params));
            let [cx, cy] = two.params.center;
            for k in 0..16 {
                let th = k as f64 * PI / 8.0;
                for rho in [0.0, 0.5 * ro, ro - 1e-9] {
                    let (x, y) = (cx + rho * th.cos(), cy + rho * th.sin());
                    assert_eq!(two.params.evaluate(x, y).0, three.params.evaluate(x, y).0);
                }
                let (x, y) = (cx + (ro + 5.0) * th.cos(), cy + (ro + 5.0) * th.sin());
                let (h2, t2) = two.params.evaluate(x, y);
                let (h3, t3) = three.params.evaluate(x, y);
                assert!(h3 > h2, "seed {s}: {h3} <= {h2}");
                assert!(t3 && !t2);
            }
        }
    }

    #[test]
    fn sharp_crater_rim_and_floor() {
        let p = generate_phantom(BorrmannClass::II, 5);
        let ShapeParams::SharpCrater { core, decay_80_mm } = p.params.shape else {
            unreachable!()
        };
        let [cx, cy] = p.params.center;
        let (floor, _) = p.params.evaluate(cx, cy);
        assert!(floor <= BASE_LAYER_MM - core.floor_depth + RIPPLE_MAX_MM + 1e-9);
        let (rim, _) = p.params.evaluate(cx + core.rim_radius, cy);
        assert!(rim >= core.rim_height - 1e-9);
        // 80 % decay within the margin length
        let edge = core.rim_top(core.outer_edge());
        let (after, _) = p.params.evaluate(cx + core.outer_edge() + decay_80_mm, cy);
        let rip = wave_sum(&p.params.ripple, cx + core.outer_edge() + decay_80_mm, cy);
        let expect = BASE_LAYER_MM + 0.2 * (edge - BASE_LAYER_MM) + rip;
        assert!((after - expect).abs() < 1e-9);
        assert!(decay_80_mm <= 1.5);
    }

    #[test]
    fn field_invariants_hold_for_bank() {
        let bank = build_phantom_bank(2024);
        assert_eq!(bank.len(), 44);
        for class in BorrmannClass::ALL {
            assert_eq!(bank.iter().filter(|p| p.borrmann_class == class).count(), 11);
        }
        assert_eq!(bank[0].phantom_id, "I-00");
        assert_eq!(bank[43].phantom_id, "IV-10");
        for p in &bank {
            assert!(p.heights.iter().all(|h| (0.0..=12.0).contains(h)));
            let t = p.mean_stiffness(true).unwrap();
            let h = p.mean_stiffness(false).unwrap();
            assert!(t >= 5.0 * h, "{}: {t} vs {h}", p.phantom_id);
            assert!(p
                .stiffness
                .iter()
                .all(|&k| k as f64 == K_HEALTHY as f32 as f64 || k as f64 == K_TUMOR as f32 as f64));
        }
    }

    #[test]
    fn bank_determinism_and_seed_sensitivity() {
        let a = build_phantom_bank_with(7, 2, 32).unwrap();
        let b = build_phantom_bank_with(7, 2, 32).unwrap();
        assert_eq!(a, b);
        let c = build_phantom_bank_with(8, 2, 32).unwrap();
        assert_ne!(a[0].params, c[0].params);
    }

    #[test]
    fn bilinear_lookup_cases() {
        let mut p = generate_phantom_with_grid(BorrmannClass::IV, 1, 3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (h, k) = p.sample_field(j as f64 * 15.0, i as f64 * 15.0).unwrap();
                assert_eq!(h, p.height_at_node(i, j));
                assert_eq!(k, p.stiffness_at_node(i, j));
            }
        }
        p.heights = vec![2.0; 9];
        assert_eq!(p.sample_field(7.5, 7.5).unwrap().0, 2.0);
        p.heights = vec![0.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(p.sample_field(7.5, 7.5).unwrap().0, 1.0);
        assert!(matches!(p.sample_field(-0.1, 3.0), Err(PhantomError::OutOfBounds(..))));
        assert!(matches!(p.sample_field(3.0, 30.01), Err(PhantomError::OutOfBounds(..))));
    }

    #[test]
    fn persistence_roundtrip_is_exact() {
        let p = generate_phantom_with_grid(BorrmannClass::III, 99, 16, 20).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = PhantomSpec::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, p);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        let truncated = &buf[..buf.len() - 3];
        assert!(PhantomSpec::read_from(&mut &truncated[..]).is_err());
    }
}
