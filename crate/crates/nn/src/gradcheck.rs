//! Central finite-difference checks of analytic gradients, in f64.

use std::hash::{DefaultHasher, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::Layer;
use crate::model::{softmax_cross_entropy, Network};
use crate::tensor::{NnError, Tensor};

pub const FD_EPS: f64 = 1e-6;

/// Denominator floor for the relative error. Central differences at `FD_EPS`
/// carry roundoff near `1e-10..1e-9` in absolute terms, so below this
/// magnitude the comparison becomes an absolute one.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose `±FD_EPS` probes changed a ReLU or pooling branch;
    /// the central difference straddles a kink there and is not compared.
    pub skipped: usize,
}

impl GradReport {
    /// Largest share of probes allowed to straddle a kink.
    pub fn skip_fraction(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = e;
            self.worst = what();
        }
    }
}

fn layer_digest(layer: &dyn Layer<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    layer.branch_digest(&mut h);
    h.finish()
}

/// Up to `limit` indices spread evenly over `0..n`.
fn probe_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..limit).map(|i| i * n / limit).collect();
    v.dedup();
    v
}

/// Checks input and parameter gradients of one layer against the scalar loss
/// `sum(r * y)` for a fixed random `r`. The outputs are differenced before
/// the projection so roundoff from the large sum does not swamp small
/// gradients.
pub fn check_layer(
    layer: &mut dyn Layer<f64>,
    x: &Tensor<f64>,
    train: bool,
    limit: usize,
    seed: u64,
) -> Result<GradReport, NnError> {
    let y = layer.forward(x, train)?;
    let base = layer_digest(layer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(&y.shape, |_| rng.random_range(-1.0..1.0));
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&r);
    let fd = |plus: Tensor<f64>, minus: Tensor<f64>| -> f64 {
        plus.data
            .iter()
            .zip(&minus.data)
            .zip(&r.data)
            .map(|((p, m), w)| (p - m) * w)
            .sum::<f64>()
            / (2.0 * FD_EPS)
    };
    let mut rep = GradReport::default();
    if !dx.is_empty() {
        let mut xp = x.clone();
        for i in probe_indices(x.len(), limit) {
            let orig = xp.data[i];
            xp.data[i] = orig + FD_EPS;
            let yp = layer.forward(&xp, train)?;
            let dp = layer_digest(layer);
            xp.data[i] = orig - FD_EPS;
            let ym = layer.forward(&xp, train)?;
            let dm = layer_digest(layer);
            xp.data[i] = orig;
            if dp != base || dm != base {
                rep.skipped += 1;
                continue;
            }
            rep.record(|| format!("input[{i}]"), dx.data[i], fd(yp, ym));
        }
    }
    let grads: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();
    for (k, g) in grads.iter().enumerate() {
        for i in probe_indices(g.len(), limit) {
            let orig = layer.params()[k].value[i];
            layer.params_mut()[k].value[i] = orig + FD_EPS;
            let yp = layer.forward(x, train)?;
            let dp = layer_digest(layer);
            layer.params_mut()[k].value[i] = orig - FD_EPS;
            let ym = layer.forward(x, train)?;
            let dm = layer_digest(layer);
            layer.params_mut()[k].value[i] = orig;
            if dp != base || dm != base {
                rep.skipped += 1;
                continue;
            }
            let name = layer.params()[k].name.clone();
            rep.record(|| format!("{name}[{i}]"), g[i], fd(yp, ym));
        }
    }
    Ok(rep)
}

/// Checks every parameter gradient of a whole network under the training
/// cross-entropy loss.
pub fn check_network(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    limit: usize,
) -> Result<GradReport, NnError> {
    net.zero_grad();
    net.loss_and_backward(x, labels)?;
    let base = net.branch_digest();
    let grads: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let mut rep = GradReport::default();
    for (k, g) in grads.iter().enumerate() {
        for i in probe_indices(g.len(), limit) {
            let orig = net.params()[k].value[i];
            net.params_mut()[k].value[i] = orig + FD_EPS;
            let lp = softmax_cross_entropy(&net.forward(x, true)?, labels)?.0;
            let dp = net.branch_digest();
            net.params_mut()[k].value[i] = orig - FD_EPS;
            let lm = softmax_cross_entropy(&net.forward(x, true)?, labels)?.0;
            let dm = net.branch_digest();
            net.params_mut()[k].value[i] = orig;
            if dp != base || dm != base {
                rep.skipped += 1;
                continue;
            }
            let name = net.params()[k].name.clone();
            rep.record(|| format!("{name}[{i}]"), g[i], (lp - lm) / (2.0 * FD_EPS));
        }
    }
    Ok(rep)
}
