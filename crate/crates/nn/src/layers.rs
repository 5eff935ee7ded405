//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`. Images
//! are processed one at a time through `im2col` + GEMM, so a sample's
//! arithmetic in eval mode never depends on what else is in the batch.

use std::hash::{Hash, Hasher};

use crate::scalar::{gemm, Scalar};
use crate::tensor::{NnError, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param value does not match its shape");
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![T::zero(); n],
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Non-trainable state saved with the model (batch-norm running moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

pub trait Layer<T: Scalar>: Send {
    fn name(&self) -> &str;
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }
    /// Feeds the piecewise-linear branch choices of the last forward (ReLU
    /// masks, pooling winners) into `h`, so finite-difference checks can tell
    /// when a perturbation crossed a kink.
    fn branch_digest(&self, _h: &mut dyn Hasher) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = n + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Unfold one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    let (h, w) = (g.h as isize, g.w as isize);
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p;
                let off_x = (kj * g.dilation) as isize - pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // Valid output range where 0 <= ox + off_x < w.
                        let lo = (-off_x).clamp(0, g.wo as isize) as usize;
                        let hi = (w - off_x).clamp(0, g.wo as isize) as usize;
                        dst[..lo].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + off_x) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                        dst[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off_x;
                            *d = if ix >= 0 && ix < w { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back to the image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    let (h, w) = (g.h as isize, g.w as isize);
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p;
                let off_x = (kj * g.dilation) as isize - pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with square kernels, stride, zero padding and
/// dilation. Weight layout is `[Cout, Cin, k, k]`.
pub struct Conv2d<T> {
    name: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    /// Skip the input gradient (first layer of a network).
    pub input_grad: bool,
    cache: Option<(Tensor<T>, ConvGeom)>,
    scratch: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Size-preserving (at stride 1) 3×3 convolution.
    pub fn k3(cin: usize, cout: usize, stride: usize, dilation: usize) -> Self {
        Self {
            cin,
            cout,
            k: 3,
            stride,
            pad: dilation,
            dilation,
            bias: false,
        }
    }

    pub fn k1(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            k: 1,
            stride,
            pad: 0,
            dilation: 1,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.fan_in() + if self.bias { self.cout } else { 0 }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: impl Into<String>, spec: ConvSpec, weight: Vec<T>) -> Self {
        let name = name.into();
        let weight = Param::new(format!("{name}.weight"), &[spec.cout, spec.cin, spec.k, spec.k], weight);
        let bias = spec.bias.then(|| Param::zeros(format!("{name}.bias"), &[spec.cout]));
        Self {
            name,
            weight,
            bias,
            cin: spec.cin,
            cout: spec.cout,
            k: spec.k,
            stride: spec.stride,
            pad: spec.pad,
            dilation: spec.dilation,
            input_grad: true,
            cache: None,
            scratch: Vec::new(),
        }
    }

    fn geom(&self, x: &Tensor<T>) -> Result<ConvGeom, NnError> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cin {
            return Err(NnError::ShapeMismatch(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.cin
            )));
        }
        let ho = conv_out_size(h, self.k, self.stride, self.pad, self.dilation);
        let wo = conv_out_size(w, self.k, self.stride, self.pad, self.dilation);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(ConvGeom {
                cin: c,
                h,
                w,
                k: self.k,
                stride: self.stride,
                pad: self.pad,
                dilation: self.dilation,
                ho,
                wo,
            }),
            _ => Err(NnError::ShapeMismatch(format!(
                "{}: {h}×{w} input too small for kernel {} dilation {}",
                self.name, self.k, self.dilation
            ))),
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        let g = self.geom(x)?;
        let n = x.batch();
        let (kk, p) = (g.rows(), g.cols());
        let in_len = x.sample_len();
        let mut out = Tensor::zeros(&[n, self.cout, g.ho, g.wo]);
        if !g.is_pointwise() {
            self.scratch.resize(kk * p, T::zero());
        }
        for i in 0..n {
            let xi = &x.data[i * in_len..(i + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut self.scratch);
                &self.scratch
            };
            let yi = &mut out.data[i * self.cout * p..(i + 1) * self.cout * p];
            gemm(self.cout, kk, p, &self.weight.value, false, cols, false, T::zero(), yi);
            if let Some(b) = &self.bias {
                for (co, row) in yi.chunks_exact_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + b.value[co]);
                }
            }
        }
        self.cache = Some((x.clone(), g));
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (x, g) = self.cache.take().expect("backward before forward");
        let n = x.batch();
        let (kk, p) = (g.rows(), g.cols());
        let in_len = x.sample_len();
        let mut dx = if self.input_grad {
            Tensor::zeros(&x.shape)
        } else {
            Tensor::empty()
        };
        let mut dcols = vec![T::zero(); if self.input_grad { kk * p } else { 0 }];
        if !g.is_pointwise() {
            self.scratch.resize(kk * p, T::zero());
        }
        for i in 0..n {
            let xi = &x.data[i * in_len..(i + 1) * in_len];
            let dyi = &dy.data[i * self.cout * p..(i + 1) * self.cout * p];
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut self.scratch);
                &self.scratch
            };
            gemm(self.cout, p, kk, dyi, false, cols, true, T::one(), &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                for (co, row) in dyi.chunks_exact(p).enumerate() {
                    b.grad[co] = b.grad[co] + row.iter().copied().sum();
                }
            }
            if self.input_grad {
                let dxi = &mut dx.data[i * in_len..(i + 1) * in_len];
                if g.is_pointwise() {
                    gemm(kk, self.cout, p, &self.weight.value, true, dyi, false, T::zero(), dxi);
                } else {
                    gemm(kk, self.cout, p, &self.weight.value, true, dyi, false, T::zero(), &mut dcols);
                    col2im(&dcols, &g, dxi);
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Per-channel batch normalisation over `(N, H, W)`.
pub struct BatchNorm2d<T> {
    name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub channels: usize,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![T::zero(); channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![T::one(); channels],
            },
            name,
            channels,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(NnError::ShapeMismatch(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.channels
            )));
        }
        if train && n < 2 {
            return Err(NnError::SingularBatch);
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let eps = T::of_f64(BN_EPS);
        let mom = T::of_f64(BN_MOMENTUM);
        let mut out = Tensor::zeros(&x.shape);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let idx = |i: usize| (i * c + ch) * hw;
            let (mean, var) = if train {
                let mut s = T::zero();
                for i in 0..n {
                    s = s + x.data[idx(i)..idx(i) + hw].iter().copied().sum();
                }
                let mean = s / T::of_f64(m);
                let mut v = T::zero();
                for i in 0..n {
                    v = v + x.data[idx(i)..idx(i) + hw]
                        .iter()
                        .map(|&a| (a - mean) * (a - mean))
                        .sum();
                }
                let var = v / T::of_f64(m);
                let unbiased = var * T::of_f64(m / (m - 1.0));
                let rm = &mut self.running_mean.value[ch];
                *rm = (T::one() - mom) * *rm + mom * mean;
                let rv = &mut self.running_var.value[ch];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
                (mean, var)
            } else {
                (self.running_mean.value[ch], self.running_var.value[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let r = idx(i)..idx(i) + hw;
                for j in r {
                    let xh = (x.data[j] - mean) * is;
                    xhat[j] = xh;
                    out.data[j] = g * xh + b;
                }
            }
        }
        self.cache = Some(BnCache {
            shape: x.shape.clone(),
            xhat,
            inv_std,
            train,
        });
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward before forward");
        let (n, c, h, w) = (cache.shape[0], cache.shape[1], cache.shape[2], cache.shape[3]);
        let hw = h * w;
        let m = T::of_f64((n * hw) as f64);
        let mut dx = Tensor::zeros(&cache.shape);
        for ch in 0..c {
            let idx = |i: usize| (i * c + ch) * hw;
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for i in 0..n {
                for j in idx(i)..idx(i) + hw {
                    sum_dy = sum_dy + dy.data[j];
                    sum_dy_xhat = sum_dy_xhat + dy.data[j] * cache.xhat[j];
                }
            }
            self.beta.grad[ch] = self.beta.grad[ch] + sum_dy;
            self.gamma.grad[ch] = self.gamma.grad[ch] + sum_dy_xhat;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            for i in 0..n {
                for j in idx(i)..idx(i) + hw {
                    dx.data[j] = if cache.train {
                        g * is / m * (m * dy.data[j] - sum_dy - cache.xhat[j] * sum_dy_xhat)
                    } else {
                        g * is * dy.data[j]
                    };
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

pub struct Relu<T> {
    name: String,
    mask: Vec<bool>,
    shape: Vec<usize>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> Relu<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            mask: Vec::new(),
            shape: Vec::new(),
            _t: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        self.mask = x.data.iter().map(|&v| v > T::zero()).collect();
        self.shape = x.shape.clone();
        Ok(x.map(|v| if v > T::zero() { v } else { T::zero() }))
    }

    fn branch_digest(&self, mut h: &mut dyn Hasher) {
        self.mask.hash(&mut h);
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: dy
                .data
                .iter()
                .zip(&self.mask)
                .map(|(&g, &m)| if m { g } else { T::zero() })
                .collect(),
        }
    }
}

/// Max pooling with a square window; ties go to the first maximum.
pub struct MaxPool2d<T> {
    name: String,
    pub k: usize,
    pub stride: usize,
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool2d<T> {
    pub fn new(name: impl Into<String>, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            k,
            stride,
            argmax: Vec::new(),
            in_shape: Vec::new(),
            _t: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = match (
            conv_out_size(h, self.k, self.stride, 0, 1),
            conv_out_size(w, self.k, self.stride, 0, 1),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(NnError::ShapeMismatch(format!("{}: input {h}×{w} too small", self.name))),
        };
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        self.argmax = vec![0; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for dy in 0..self.k {
                        for dx in 0..self.k {
                            let j = base + (oy * self.stride + dy) * w + ox * self.stride + dx;
                            if x.data[j] > x.data[best] {
                                best = j;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data[o] = x.data[best];
                    self.argmax[o] = best;
                }
            }
        }
        self.in_shape = x.shape.clone();
        Ok(out)
    }

    fn branch_digest(&self, mut h: &mut dyn Hasher) {
        self.argmax.hash(&mut h);
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(&self.in_shape);
        for (o, &j) in self.argmax.iter().enumerate() {
            dx.data[j] = dx.data[j] + dy.data[o];
        }
        dx
    }
}

/// `[N, C, H, W] → [N, C]` spatial mean.
pub struct GlobalAvgPool<T> {
    name: String,
    in_shape: Vec<usize>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> GlobalAvgPool<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            in_shape: Vec::new(),
            _t: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let scale = T::of_f64(1.0 / hw as f64);
        let data = x
            .data
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        self.in_shape = x.shape.clone();
        Tensor::new(vec![n, c], data)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let hw: usize = self.in_shape[2..].iter().product();
        let scale = T::of_f64(1.0 / hw as f64);
        Tensor {
            shape: self.in_shape.clone(),
            data: dy.data.iter().flat_map(|&g| std::iter::repeat_n(g * scale, hw)).collect(),
        }
    }
}

/// Fully connected layer on flattened samples; weight layout `[out, in]`.
pub struct Linear<T> {
    name: String,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub fan_in: usize,
    pub fan_out: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, weight: Vec<T>) -> Self {
        let name = name.into();
        Self {
            weight: Param::new(format!("{name}.weight"), &[fan_out, fan_in], weight),
            bias: Param::zeros(format!("{name}.bias"), &[fan_out]),
            name,
            fan_in,
            fan_out,
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        let n = x.batch();
        if x.sample_len() != self.fan_in {
            return Err(NnError::ShapeMismatch(format!(
                "{}: expected {} features, got {}",
                self.name,
                self.fan_in,
                x.sample_len()
            )));
        }
        let mut out = Tensor::zeros(&[n, self.fan_out]);
        for i in 0..n {
            let xi = &x.data[i * self.fan_in..(i + 1) * self.fan_in];
            let yi = &mut out.data[i * self.fan_out..(i + 1) * self.fan_out];
            yi.copy_from_slice(&self.bias.value);
            gemm(1, self.fan_in, self.fan_out, xi, false, &self.weight.value, true, T::one(), yi);
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("backward before forward");
        let n = x.batch();
        gemm(self.fan_out, n, self.fan_in, &dy.data, true, &x.data, false, T::one(), &mut self.weight.grad);
        for row in dy.data.chunks_exact(self.fan_out) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        let mut dx = Tensor::zeros(&x.shape);
        gemm(n, self.fan_out, self.fan_in, &dy.data, false, &self.weight.value, false, T::zero(), &mut dx.data);
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Basic two-conv residual block:
/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
pub struct ResidualBlock<T> {
    name: String,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    /// 1×1 projection used when the shape changes.
    pub projection: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    out_mask: Vec<bool>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(
        name: impl Into<String>,
        conv1: Conv2d<T>,
        conv2: Conv2d<T>,
        projection: Option<Conv2d<T>>,
    ) -> Self {
        let name = name.into();
        let mid = conv1.cout;
        let out = conv2.cout;
        Self {
            bn1: BatchNorm2d::new(format!("{name}.bn1"), mid),
            bn2: BatchNorm2d::new(format!("{name}.bn2"), out),
            relu1: Relu::new(format!("{name}.relu1")),
            projection: projection.map(|c| {
                let bn = BatchNorm2d::new(format!("{name}.proj_bn"), c.cout);
                (c, bn)
            }),
            name,
            conv1,
            conv2,
            out_mask: Vec::new(),
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let h = self.conv1.forward(x, train)?;
        let h = self.bn1.forward(&h, train)?;
        let h = self.relu1.forward(&h, train)?;
        let h = self.conv2.forward(&h, train)?;
        let mut h = self.bn2.forward(&h, train)?;
        let shortcut = match &mut self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(x, train)?;
                bn.forward(&s, train)?
            }
            None => x.clone(),
        };
        if shortcut.shape != h.shape {
            return Err(NnError::ShapeMismatch(format!(
                "{}: residual {:?} vs shortcut {:?}",
                self.name, h.shape, shortcut.shape
            )));
        }
        self.out_mask = Vec::with_capacity(h.len());
        for (v, &s) in h.data.iter_mut().zip(&shortcut.data) {
            let z = *v + s;
            let on = z > T::zero();
            self.out_mask.push(on);
            *v = if on { z } else { T::zero() };
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dz = Tensor {
            shape: dy.shape.clone(),
            data: dy
                .data
                .iter()
                .zip(&self.out_mask)
                .map(|(&g, &m)| if m { g } else { T::zero() })
                .collect(),
        };
        let g = self.bn2.backward(&dz);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        let ds = match &mut self.projection {
            Some((conv, bn)) => {
                let s = bn.backward(&dz);
                conv.backward(&s)
            }
            None => dz,
        };
        for (a, &b) in dx.data.iter_mut().zip(&ds.data) {
            *a = *a + b;
        }
        dx
    }

    fn branch_digest(&self, mut h: &mut dyn Hasher) {
        self.relu1.branch_digest(h);
        self.out_mask.hash(&mut h);
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((c, b)) = &self.projection {
            v.extend(c.params());
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.projection {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        if let Some((_, b)) = &self.projection {
            v.extend(b.buffers());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        if let Some((_, b)) = &mut self.projection {
            v.extend(b.buffers_mut());
        }
        v
    }
}
