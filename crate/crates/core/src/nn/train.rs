use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{softmax, Network, Real};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Learning rate for `epoch` under the configured schedule.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        match self.lr_schedule {
            LrSchedule::Constant => Ok(self.learning_rate),
            LrSchedule::Cosine => cosine_lr(self.learning_rate, epoch, self.epochs),
        }
    }

    /// Seed of the batch shuffle for `epoch`.
    pub fn shuffle_seed(&self, epoch: usize) -> u64 {
        derive_seed(self.seed, "shuffle", epoch as u64)
    }
}

/// Half-cosine decay from `base` to 0 over `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> Result<f64> {
    if epoch >= total {
        return Err(Error::Schedule { epoch, total });
    }
    Ok(base * (1.0 + (PI * epoch as f64 / total as f64).cos()) / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<F> {
    pub weights: Vec<F>,
    pub bias: Vec<F>,
}

/// Gradient buffers for every layer; frozen layers hold empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<LayerGradient<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(net: &Network<F>) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                if l.frozen {
                    LayerGradient {
                        weights: Vec::new(),
                        bias: Vec::new(),
                    }
                } else {
                    LayerGradient {
                        weights: vec![F::zero(); l.weights.len()],
                        bias: vec![F::zero(); l.bias.len()],
                    }
                }
            })
            .collect();
        Self { layers }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = F::zero());
            l.bias.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn values(&self) -> impl Iterator<Item = F> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut F> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Euclidean norm, accumulated in double precision.
    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for v in self.values_mut() {
            *v = *v * factor;
        }
    }
}

impl<F: Real> Network<F> {
    /// Adds the cross-entropy gradient of one example to `grads`. Returns
    /// the example's loss. Backpropagation stops at the lowest trainable
    /// layer.
    pub fn accumulate_gradient(&self, x: &[F], y: usize, grads: &mut Gradients<F>) -> Result<f64> {
        let k = self.class_count();
        if y >= k {
            return Err(Error::Label {
                label: y,
                classes: k,
            });
        }
        let acts = self.forward_trace(x)?;
        let pred = softmax(&acts[acts.len() - 1])?;
        let loss = -pred.probs()[y].ln();
        let Some(lowest) = self.layers().iter().position(|l| !l.frozen) else {
            return Ok(loss);
        };

        let mut delta: Vec<F> = pred
            .probs()
            .iter()
            .enumerate()
            .map(|(i, &p)| F::from_f64(if i == y { p - 1.0 } else { p }))
            .collect();

        for l in (lowest..self.layers().len()).rev() {
            let layer = &self.layers()[l];
            let input = &acts[l];
            if !layer.frozen {
                let g = &mut grads.layers[l];
                for (i, &d) in delta.iter().enumerate() {
                    let row = &mut g.weights[i * layer.inputs..(i + 1) * layer.inputs];
                    for (gw, &a) in row.iter_mut().zip(input) {
                        *gw = *gw + d * a;
                    }
                    g.bias[i] = g.bias[i] + d;
                }
            }
            if l > lowest {
                let mut prev = vec![F::zero(); layer.inputs];
                for (i, &d) in delta.iter().enumerate() {
                    for (p, &w) in prev.iter_mut().zip(layer.row(i)) {
                        *p = *p + w * d;
                    }
                }
                // ReLU derivative taken from the post-activation value.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= F::zero() {
                        *p = F::zero();
                    }
                }
                delta = prev;
            }
        }
        Ok(loss)
    }

    /// `θ ← θ − lr · (grad_sum / count + λ θ)` on every trainable layer.
    pub fn apply_gradient(&mut self, grad_sum: &Gradients<F>, count: usize, lr: f64, weight_decay: f64) {
        let inv = F::one() / F::from_f64(count as f64);
        let lr = F::from_f64(lr);
        let decay = F::from_f64(weight_decay);
        for (layer, g) in self.layers_mut().iter_mut().zip(&grad_sum.layers) {
            if layer.frozen {
                continue;
            }
            for (w, &gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w = *w - lr * (gw * inv + decay * *w);
            }
            for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b = *b - lr * (gb * inv + decay * *b);
            }
        }
    }
}

/// Mean cross-entropy over `data` and the gradient of that mean.
pub fn batch_loss_and_gradient<F: Real>(
    net: &Network<F>,
    data: &Dataset,
) -> Result<(f64, Gradients<F>)> {
    if data.is_empty() {
        return Err(Error::EmptyData("gradient batch"));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut total = 0.0;
    for point in data.points() {
        let x = to_real(&point.x);
        total += net.accumulate_gradient(&x, point.y, &mut grads)?;
    }
    let n = data.len();
    grads.scale(F::one() / F::from_f64(n as f64));
    Ok((total / n as f64, grads))
}

pub(crate) fn to_real<F: Real>(x: &[f64]) -> Vec<F> {
    x.iter().map(|&v| F::from_f64(v)).collect()
}

pub(crate) fn check_trainable<F: Real>(net: &Network<F>, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData("training set"));
    }
    if data.feature_dim() != net.input_dim() {
        return Err(Error::InputShape {
            expected: net.input_dim(),
            actual: data.feature_dim(),
        });
    }
    if data.class_count() > net.class_count() {
        return Err(Error::Label {
            label: data.class_count() - 1,
            classes: net.class_count(),
        });
    }
    Ok(())
}

/// Indices of `0..n` in the seeded order used for `epoch`.
pub(crate) fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    order
}

/// One epoch of minibatch SGD over a seeded shuffle of `data`.
pub fn sgd_epoch<F: Real>(
    mut net: Network<F>,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Network<F>> {
    cfg.validate()?;
    check_trainable(&net, data)?;
    if cfg.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            data.len()
        )));
    }
    let lr = cfg.lr_at(epoch)?;
    if net.trainable_param_count() == 0 {
        return Ok(net);
    }
    let inputs: Vec<Vec<F>> = data.points().iter().map(|p| to_real(&p.x)).collect();
    let order = epoch_order(data.len(), cfg.shuffle_seed(epoch));
    let mut grads = Gradients::zeros_like(&net);
    for batch in order.chunks(cfg.batch_size) {
        grads.fill_zero();
        for &i in batch {
            net.accumulate_gradient(&inputs[i], data.points()[i].y, &mut grads)?;
        }
        net.apply_gradient(&grads, batch.len(), lr, cfg.weight_decay);
    }
    Ok(net)
}

/// Runs `cfg.epochs` epochs of [`sgd_epoch`].
pub fn train<F: Real>(mut net: Network<F>, data: &Dataset, cfg: &TrainConfig) -> Result<Network<F>> {
    cfg.validate()?;
    check_trainable(&net, data)?;
    for epoch in 0..cfg.epochs {
        net = sgd_epoch(net, data, cfg, epoch)?;
    }
    Ok(net)
}

/// Fraction of `data` whose argmax prediction equals the label.
pub fn accuracy<F: Real>(net: &Network<F>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("accuracy"));
    }
    let mut correct = 0usize;
    for p in data.points() {
        if net.predict(&p.x)?.argmax() == p.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
