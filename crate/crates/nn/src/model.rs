//! The three classifier families and the softmax cross-entropy objective.

use std::fmt;
use std::hash::{DefaultHasher, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::layers::{
    BatchNorm2d, Buffer, Conv2d, ConvSpec, GlobalAvgPool, Layer, Linear, MaxPool2d, Param, Relu,
    ResidualBlock,
};
use crate::scalar::Scalar;
use crate::tensor::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DilatedResnet,
    ResnetBaseline,
    AlexnetBaseline,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::DilatedResnet, Arch::ResnetBaseline, Arch::AlexnetBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::DilatedResnet => "dilated_resnet",
            Arch::ResnetBaseline => "resnet_baseline",
            Arch::AlexnetBaseline => "alexnet_baseline",
        }
    }

    /// Trainable parameters of the full-size reference version of each
    /// family, kept as reference metadata only.
    pub fn reference_param_count(self) -> u64 {
        match self {
            Arch::DilatedResnet => 2_800_000,
            Arch::ResnetBaseline => 11_200_000,
            Arch::AlexnetBaseline => 57_000_000,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| NnError::InvalidConfig(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// `[height, width]` of the input images.
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub stem_width: usize,
    /// Residual stage widths, or the five conv widths for the plain stack.
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub dilations: Vec<usize>,
    /// Hidden fully connected width of the plain stack.
    pub fc_hidden: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn dilated_resnet(input: usize) -> Self {
        Self {
            arch: Arch::DilatedResnet,
            input_size: [input, input],
            in_channels: 3,
            stem_width: 16,
            widths: vec![16, 32, 64],
            blocks: vec![2, 2, 2],
            dilations: vec![1, 2, 4],
            fc_hidden: 0,
            num_classes: 4,
        }
    }

    pub fn resnet_baseline(input: usize) -> Self {
        Self {
            arch: Arch::ResnetBaseline,
            dilations: vec![1, 1, 1],
            ..Self::dilated_resnet(input)
        }
    }

    pub fn alexnet_baseline(input: usize) -> Self {
        Self {
            arch: Arch::AlexnetBaseline,
            input_size: [input, input],
            in_channels: 3,
            stem_width: 0,
            widths: vec![16, 32, 48, 48, 32],
            blocks: vec![],
            dilations: vec![],
            fc_hidden: 128,
            num_classes: 4,
        }
    }

    pub fn for_arch(arch: Arch, input: usize) -> Self {
        match arch {
            Arch::DilatedResnet => Self::dilated_resnet(input),
            Arch::ResnetBaseline => Self::resnet_baseline(input),
            Arch::AlexnetBaseline => Self::alexnet_baseline(input),
        }
    }

    /// Same layout with every width scaled to `w` channels (for small checks).
    pub fn narrow(mut self, w: usize) -> Self {
        self.widths.iter_mut().for_each(|c| *c = w);
        if self.stem_width > 0 {
            self.stem_width = w;
        }
        if self.fc_hidden > 0 {
            self.fc_hidden = w * 2;
        }
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.num_classes < 2 || self.in_channels == 0 {
            return bad("need at least two classes and one input channel".into());
        }
        if self.widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        match self.arch {
            Arch::AlexnetBaseline => {
                if self.widths.len() != 5 || self.fc_hidden == 0 {
                    return bad("plain stack needs five conv widths and a hidden layer".into());
                }
                if self.input_size[0] < 8 || self.input_size[1] < 8 {
                    return bad("plain stack needs inputs of at least 8×8".into());
                }
            }
            Arch::DilatedResnet | Arch::ResnetBaseline => {
                let n = self.widths.len();
                if n == 0 || self.blocks.len() != n || self.dilations.len() != n {
                    return bad("widths, blocks and dilations must have one entry per stage".into());
                }
                if self.stem_width == 0 || self.blocks.contains(&0) {
                    return bad("stem width and block counts must be positive".into());
                }
                if self.dilations.contains(&0) {
                    return bad("dilations must be at least 1".into());
                }
                if self.arch == Arch::DilatedResnet
                    && self.dilations.windows(2).any(|p| p[1] <= p[0])
                {
                    return bad(format!("dilations {:?} must increase strictly", self.dilations));
                }
            }
        }
        Ok(())
    }

    fn stage_stride(&self, stage: usize) -> usize {
        match (self.arch, stage) {
            (_, 0) => 2,
            (Arch::ResnetBaseline, _) => 2,
            _ => 1,
        }
    }
}

/// He fan-in normal initialiser drawing in declaration order.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn weights<T: Scalar>(&mut self, n: usize, fan_in: usize) -> Vec<T> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        (0..n).map(|_| T::of_f64(normal.sample(&mut self.rng))).collect()
    }

    fn conv<T: Scalar>(&mut self, name: String, spec: ConvSpec) -> Conv2d<T> {
        let w = self.weights(spec.cout * spec.fan_in(), spec.fan_in());
        Conv2d::new(name, spec, w)
    }

    fn linear<T: Scalar>(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear<T> {
        let w = self.weights(fan_in * fan_out, fan_in);
        Linear::new(name, fan_in, fan_out, w)
    }
}

pub struct Network<T> {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub layers: Vec<Box<dyn Layer<T>>>,
}

pub fn build_model<T: Scalar>(cfg: &ModelConfig, init_seed: u64) -> Result<Network<T>, NnError> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(init_seed),
    };
    let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
    match cfg.arch {
        Arch::DilatedResnet | Arch::ResnetBaseline => {
            let mut stem = init.conv::<T>("stem.conv".into(), ConvSpec::k3(cfg.in_channels, cfg.stem_width, 1, 1));
            stem.input_grad = false;
            layers.push(Box::new(stem));
            layers.push(Box::new(BatchNorm2d::new("stem.bn", cfg.stem_width)));
            layers.push(Box::new(Relu::new("stem.relu")));
            let mut cin = cfg.stem_width;
            for (s, ((&width, &blocks), &dil)) in
                cfg.widths.iter().zip(&cfg.blocks).zip(&cfg.dilations).enumerate()
            {
                for b in 0..blocks {
                    let stride = if b == 0 { cfg.stage_stride(s) } else { 1 };
                    let name = format!("stage{}.block{}", s + 1, b + 1);
                    let conv1 = init.conv(format!("{name}.conv1"), ConvSpec::k3(cin, width, stride, dil));
                    let conv2 = init.conv(format!("{name}.conv2"), ConvSpec::k3(width, width, 1, dil));
                    let proj = (stride != 1 || cin != width)
                        .then(|| init.conv(format!("{name}.proj"), ConvSpec::k1(cin, width, stride)));
                    layers.push(Box::new(ResidualBlock::new(name, conv1, conv2, proj)));
                    cin = width;
                }
            }
            layers.push(Box::new(GlobalAvgPool::new("pool")));
            layers.push(Box::new(init.linear("fc", cin, cfg.num_classes)));
        }
        Arch::AlexnetBaseline => {
            let w = &cfg.widths;
            let [mut h, mut wd] = cfg.input_size;
            let mut cin = cfg.in_channels;
            for (i, &cout) in w.iter().enumerate() {
                let spec = if i == 0 {
                    ConvSpec {
                        cin,
                        cout,
                        k: 5,
                        stride: 1,
                        pad: 2,
                        dilation: 1,
                        bias: true,
                    }
                } else {
                    ConvSpec::k3(cin, cout, 1, 1).with_bias()
                };
                let mut conv = init.conv::<T>(format!("conv{}", i + 1), spec);
                conv.input_grad = i > 0;
                layers.push(Box::new(conv));
                layers.push(Box::new(Relu::new(format!("relu{}", i + 1))));
                if matches!(i, 0 | 1 | 4) {
                    layers.push(Box::new(MaxPool2d::new(format!("pool{}", i + 1), 2, 2)));
                    h /= 2;
                    wd /= 2;
                }
                cin = cout;
            }
            layers.push(Box::new(init.linear("fc1", cin * h * wd, cfg.fc_hidden)));
            layers.push(Box::new(Relu::new("fc1.relu")));
            layers.push(Box::new(init.linear("fc2", cfg.fc_hidden, cfg.num_classes)));
        }
    }
    Ok(Network {
        config: cfg.clone(),
        init_seed,
        layers,
    })
}

impl<T: Scalar> Network<T> {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.input_size[0], self.config.input_size[1]]
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.input_shape() {
            return Err(NnError::ShapeMismatch(format!(
                "network expects {:?} samples, got {:?}",
                self.input_shape(),
                &x.shape[1..]
            )));
        }
        let mut a = self.layers[0].forward(x, train)?;
        for l in &mut self.layers[1..] {
            a = l.forward(&a, train)?;
        }
        Ok(a)
    }

    /// Shape after every top-level layer, for architecture checks.
    pub fn trace_shapes(&mut self, x: &Tensor<T>) -> Result<Vec<(String, Vec<usize>)>, NnError> {
        let mut out = Vec::new();
        let mut a = x.clone();
        for l in &mut self.layers {
            a = l.forward(&a, false)?;
            out.push((l.name().to_string(), a.shape.clone()));
        }
        Ok(out)
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let mut g = dlogits.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters then buffers, layer by layer, flattened.
    pub fn state(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            for p in l.params() {
                out.extend_from_slice(&p.value);
            }
            for b in l.buffers() {
                out.extend_from_slice(&b.value);
            }
        }
        out
    }

    pub fn state_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.params().iter().map(|p| p.len()).sum::<usize>()
                    + l.buffers().iter().map(|b| b.value.len()).sum::<usize>()
            })
            .sum()
    }

    pub fn load_state(&mut self, state: &[T]) -> Result<(), NnError> {
        if state.len() != self.state_len() {
            return Err(NnError::Checkpoint(format!(
                "state has {} values, model needs {}",
                state.len(),
                self.state_len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for p in l.params_mut() {
                let n = p.len();
                p.value.copy_from_slice(&state[off..off + n]);
                off += n;
            }
            for b in l.buffers_mut() {
                let n = b.value.len();
                b.value.copy_from_slice(&state[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Hash of every ReLU mask and pooling choice from the last forward.
    pub fn branch_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for l in &self.layers {
            l.branch_digest(&mut h);
        }
        h.finish()
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.forward(x, false)
    }

    /// Forward, loss and backward in one call; gradients accumulate.
    pub fn loss_and_backward(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>), NnError> {
        let logits = self.forward(x, true)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        self.backward(&dlogits);
        Ok((loss, logits))
    }
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = logits.sample_len();
    logits
        .data
        .chunks_exact(c)
        .map(|row| {
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>), NnError> {
    let n = logits.batch();
    let c = logits.sample_len();
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::LabelOutOfRange { label, classes: c });
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&logits.shape);
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[y].as_f64();
        for k in 0..c {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad.data[i * c + k] = T::of_f64((p[k] - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
