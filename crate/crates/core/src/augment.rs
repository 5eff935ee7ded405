//! Resizing, stochastic augmentation and tensor ingest for tactile images.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RgbImage;
use crate::seed::{derive_seed, Rng, SeedPart};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("cannot resize {0}×{1} to {2}×{3}")]
    ZeroSize(usize, usize, usize, usize),
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpFlags {
    pub crop: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    pub blur: bool,
    pub noise: bool,
}

impl Default for OpFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl OpFlags {
    pub const ALL: OpFlags = OpFlags {
        crop: true,
        hflip: true,
        vflip: true,
        rotate: true,
        blur: true,
        noise: true,
    };
    pub const NONE: OpFlags = OpFlags {
        crop: false,
        hflip: false,
        vflip: false,
        rotate: false,
        blur: false,
        noise: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// `[width, height]` fed to the classifier.
    pub target_size: [usize; 2],
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Crop area as a fraction of the image.
    pub crop_scale: [f64; 2],
    /// Blur σ in pixels, drawn log-uniformly.
    pub blur_sigma: [f64; 2],
    /// Noise σ in the 0–255 domain, drawn log-uniformly.
    pub noise_sigma: [f64; 2],
    pub probability: f64,
    pub enabled: OpFlags,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_size: [224, 224],
            rotation_deg: 45.0,
            crop_scale: [0.7, 1.0],
            blur_sigma: [1.0, 256.0],
            noise_sigma: [1.0, 50.0],
            probability: 0.5,
            enabled: OpFlags::ALL,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability outside [0, 1]");
        }
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !range_ok(self.blur_sigma) || !range_ok(self.noise_sigma) {
            return bad("sigma ranges must be positive and ordered");
        }
        if !(range_ok(self.crop_scale) && self.crop_scale[1] <= 1.0) {
            return bad("crop scale must lie in (0, 1]");
        }
        if !(self.rotation_deg >= 0.0) {
            return bad("rotation range must be symmetric and non-negative");
        }
        if self.target_size[0] == 0 || self.target_size[1] == 0 {
            return bad("target size must be nonzero");
        }
        Ok(())
    }

    /// Only the listed op, always applied.
    pub fn only(op: fn(&mut OpFlags)) -> Self {
        let mut enabled = OpFlags::NONE;
        op(&mut enabled);
        Self {
            probability: 1.0,
            enabled,
            ..Default::default()
        }
    }
}

/// Per-axis resampling taps: for each output index, `(first input, weights)`.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    // Widen the triangle when shrinking so every input pixel contributes.
    let support = scale.max(1.0);
    (0..n_out)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as usize).min(n_in);
            let mut w: Vec<f64> = (lo..hi)
                .map(|i| (1.0 - ((i as f64 + 0.5 - center) / support).abs()).max(0.0))
                .collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            (lo, w)
        })
        .collect()
}

fn round_byte(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor() as u8
}

/// Bilinear resampling to `width × height`; shrinking uses a widened
/// triangle kernel so the image mean is preserved.
pub fn resize(img: &RgbImage, width: usize, height: usize) -> Result<RgbImage, AugmentError> {
    if img.width == 0 || img.height == 0 || width == 0 || height == 0 {
        return Err(AugmentError::ZeroSize(img.width, img.height, width, height));
    }
    if img.width == width && img.height == height {
        return Ok(img.clone());
    }
    let tx = resample_taps(img.width, width);
    let ty = resample_taps(img.height, height);
    // Horizontal pass in f64, then vertical pass and rounding.
    let mut mid = vec![0.0f64; width * img.height * 3];
    for y in 0..img.height {
        for (x, (lo, w)) in tx.iter().enumerate() {
            for c in 0..3 {
                mid[(y * width + x) * 3 + c] = w
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * img.get(lo + k, y, c) as f64)
                    .sum();
            }
        }
    }
    let mut out = RgbImage::new(width, height);
    for (y, (lo, w)) in ty.iter().enumerate() {
        for x in 0..width {
            for c in 0..3 {
                let v: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * mid[((lo + k) * width + x) * 3 + c])
                    .sum();
                out.data[(y * width + x) * 3 + c] = round_byte(v);
            }
        }
    }
    Ok(out)
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width, img.height, |x, y| img.pixel(img.width - 1 - x, y))
}

pub fn vflip(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width, img.height, |x, y| img.pixel(x, img.height - 1 - y))
}

fn sample_clamped(img: &RgbImage, x: f64, y: f64, c: usize) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let g = |xx, yy| img.get(xx, yy, c) as f64;
    let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
    let bot = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Rotation by `deg` about the image center, bilinear with edge clamping.
pub fn rotate(img: &RgbImage, deg: f64) -> RgbImage {
    let (s, c) = deg.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    RgbImage::from_fn(img.width, img.height, |x, y| {
        // Inverse map: output pixel back into the source.
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cx + c * dx + s * dy;
        let sy = cy - s * dx + c * dy;
        [0, 1, 2].map(|ch| round_byte(sample_clamped(img, sx, sy, ch)))
    })
}

/// Crop the `[x0, x0+w) × [y0, y0+h)` rectangle.
pub fn crop(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| img.pixel(x0 + x, y0 + y))
}

fn blur_axis(src: &[f64], len: usize, stride: usize, count: usize, step: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut out = vec![0.0; src.len()];
    for line in 0..count {
        let base = line * step;
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(len - 1);
            let (mut acc, mut norm) = (0.0, 0.0);
            for j in lo..=hi {
                let w = kernel[j + r - i];
                acc += w * src[base + j * stride];
                norm += w;
            }
            out[base + i * stride] = acc / norm;
        }
    }
    out
}

/// Separable Gaussian blur. The kernel is truncated at `min(3σ, dim)` and
/// renormalised over the taps that fall inside the image.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let kernel = |dim: usize| {
        let r = ((3.0 * sigma).ceil() as usize).min(dim);
        (0..=2 * r)
            .map(|i| {
                let d = i as f64 - r as f64;
                (-0.5 * (d / sigma).powi(2)).exp()
            })
            .collect::<Vec<f64>>()
    };
    let mut out = RgbImage::new(w, h);
    for c in 0..3 {
        let plane: Vec<f64> = (0..w * h).map(|i| img.data[i * 3 + c] as f64).collect();
        let rows = blur_axis(&plane, w, 1, h, w, &kernel(w));
        let cols = blur_axis(&rows, h, w, w, 1, &kernel(h));
        for (i, v) in cols.iter().enumerate() {
            out.data[i * 3 + c] = round_byte(*v);
        }
    }
    out
}

pub fn gaussian_noise(img: &RgbImage, sigma: f64, rng: &mut Rng) -> RgbImage {
    let mut out = img.clone();
    for v in &mut out.data {
        let n: f64 = StandardNormal.sample(rng);
        *v = round_byte(*v as f64 + sigma * n);
    }
    out
}

fn log_uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        return r[0];
    }
    rng.random_range(r[0].ln()..=r[1].ln()).exp()
}

/// Stochastic pipeline: crop, hflip, vflip, rotate, blur, noise.
///
/// Every op consumes its gate draw even when disabled so that toggling one op
/// does not shift the random stream of the others.
pub fn augment(img: &RgbImage, cfg: &AugmentConfig, rng: &mut Rng) -> RgbImage {
    let p = cfg.probability;
    let gate = |on: bool, rng: &mut Rng| {
        let u: f64 = rng.random();
        on && u < p
    };
    let mut out = img.clone();
    if gate(cfg.enabled.crop, rng) {
        let scale = rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let side = scale.sqrt();
        let w = ((out.width as f64 * side).round() as usize).clamp(1, out.width);
        let h = ((out.height as f64 * side).round() as usize).clamp(1, out.height);
        let x0 = rng.random_range(0..=out.width - w);
        let y0 = rng.random_range(0..=out.height - h);
        let (ow, oh) = (out.width, out.height);
        out = resize(&crop(&out, x0, y0, w, h), ow, oh).expect("crop is nonempty");
    }
    if gate(cfg.enabled.hflip, rng) {
        out = hflip(&out);
    }
    if gate(cfg.enabled.vflip, rng) {
        out = vflip(&out);
    }
    if gate(cfg.enabled.rotate, rng) {
        let deg = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out = rotate(&out, deg);
    }
    if gate(cfg.enabled.blur, rng) {
        out = gaussian_blur(&out, log_uniform(rng, cfg.blur_sigma));
    }
    if gate(cfg.enabled.noise, rng) {
        let sigma = log_uniform(rng, cfg.noise_sigma);
        out = gaussian_noise(&out, sigma, rng);
    }
    out
}

/// Seed of the augmentation stream for one sample in one epoch.
pub fn augment_seed(run_seed: u64, epoch: usize, sample: usize) -> u64 {
    derive_seed(&[
        SeedPart::Int(run_seed),
        SeedPart::Str("augment"),
        SeedPart::Int(epoch as u64),
        SeedPart::Int(sample as u64),
    ])
}

/// Per-channel mean and standard deviation in the 0–255 domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += img.width * img.height;
        }
        let n = n.max(1) as f64;
        let mean = sum.map(|s| s / n);
        let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3));
        Self { mean, std }
    }

    /// Channel-major `3 × H × W` standardized tensor data.
    pub fn standardize(&self, img: &RgbImage) -> Vec<f32> {
        let n = img.width * img.height;
        let mut out = vec![0.0f32; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = ((img.data[i * 3 + c] as f64 - self.mean[c]) / self.std[c]) as f32;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = rng_from_seed(seed);
        let mut img = RgbImage::new(w, h);
        rng.fill(&mut img.data[..]);
        img
    }

    fn smooth_image(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            [
                round_byte(128.0 + 60.0 * (3.0 * u).sin() * (2.0 * v).cos()),
                round_byte(100.0 + 80.0 * u * v),
                round_byte(90.0 + 50.0 * (4.0 * v).sin()),
            ]
        })
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = noise_image(224, 224, 1);
        assert_eq!(resize(&img, 224, 224).unwrap(), img);
        let c = RgbImage::filled(2, 2, [17, 99, 240]);
        for (w, h) in [(1, 1), (5, 3), (64, 64)] {
            let r = resize(&c, w, h).unwrap();
            assert!(r.data.chunks_exact(3).all(|p| p == [17, 99, 240]));
        }
        assert!(matches!(resize(&c, 0, 4), Err(AugmentError::ZeroSize(..))));
    }

    #[test]
    fn downscale_preserves_checker_mean() {
        let img = RgbImage::from_fn(2592, 1944, |x, y| {
            if (x / 7 + y / 5) % 2 == 0 { [255, 0, 200] } else { [0, 255, 10] }
        });
        let r = resize(&img, 224, 224).unwrap();
        assert!((r.mean() - img.mean()).abs() <= 2.0);
    }

    #[test]
    fn all_ops_off_is_identity() {
        let img = noise_image(40, 30, 2);
        let cfg = AugmentConfig {
            probability: 0.0,
            ..Default::default()
        };
        assert_eq!(augment(&img, &cfg, &mut rng_from_seed(0)), img);
        let cfg = AugmentConfig {
            enabled: OpFlags::NONE,
            probability: 1.0,
            ..Default::default()
        };
        assert_eq!(augment(&img, &cfg, &mut rng_from_seed(0)), img);
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = noise_image(33, 20, 3);
        let cfg = AugmentConfig::only(|f| f.hflip = true);
        let mut rng = rng_from_seed(1);
        let once = augment(&img, &cfg, &mut rng);
        assert_ne!(once, img);
        assert_eq!(augment(&once, &cfg, &mut rng), img);
        assert_eq!(vflip(&vflip(&img)), img);
    }

    #[test]
    fn huge_blur_is_a_mean_filter() {
        let img = noise_image(224, 224, 4);
        let b = gaussian_blur(&img, 256.0);
        for c in 0..3 {
            let m = img.channel_mean(c);
            for i in 0..224 * 224 {
                assert!((b.data[i * 3 + c] as f64 - m).abs() <= 3.0);
            }
        }
    }

    #[test]
    fn rotation_roundtrip_on_central_region() {
        let img = smooth_image(96, 96);
        for deg in [-45.0, -20.0, 7.5, 33.0, 45.0] {
            let back = rotate(&rotate(&img, deg), -deg);
            for y in 24..72 {
                for x in 24..72 {
                    for c in 0..3 {
                        let d = back.get(x, y, c) as i32 - img.get(x, y, c) as i32;
                        assert!(d.abs() <= 3, "{deg}° at ({x},{y}): {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn tiny_noise_is_identity_within_rounding() {
        let img = noise_image(20, 20, 5);
        let n = gaussian_noise(&img, 1e-6, &mut rng_from_seed(2));
        assert_eq!(n, img);
    }

    #[test]
    fn augment_is_deterministic() {
        let img = smooth_image(48, 48);
        let cfg = AugmentConfig {
            blur_sigma: [1.0, 4.0],
            ..Default::default()
        };
        for s in 0..10 {
            let a = augment(&img, &cfg, &mut rng_from_seed(s));
            let b = augment(&img, &cfg, &mut rng_from_seed(s));
            assert_eq!(a, b);
            assert_eq!((a.width, a.height), (48, 48));
        }
    }

    #[test]
    fn standardize_zero_mean_unit_std() {
        let imgs = [noise_image(16, 16, 6), smooth_image(16, 16)];
        let st = ChannelStats::from_images(&imgs);
        let t: Vec<f32> = imgs.iter().flat_map(|i| st.standardize(i)).collect();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|k| (0..256).map(move |i| k * 768 + c * 256 + i))
                .map(|i| t[i] as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let mut c = AugmentConfig::default();
        c.probability = 1.5;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.noise_sigma = [0.0, 5.0];
        assert!(c.validate().is_err());
    }
}
