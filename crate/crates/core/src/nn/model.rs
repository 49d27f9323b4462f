use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PredictionVector, Real};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

/// Affine layer `z = W a + b` with `W` stored row-major as `[outputs x inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<F> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<F>,
    pub bias: Vec<F>,
    pub frozen: bool,
}

impl<F: Real> Layer<F> {
    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, seed: u64) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = rng(seed);
        let weights = (0..inputs * outputs)
            .map(|_| F::from_f64(normal.sample(&mut rng)))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![F::zero(); outputs],
            frozen: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub(crate) fn row(&self, i: usize) -> &[F] {
        &self.weights[i * self.inputs..(i + 1) * self.inputs]
    }

    pub(crate) fn apply(&self, input: &[F], out: &mut Vec<F>) {
        out.clear();
        out.extend((0..self.outputs).map(|i| {
            let dot: F = self
                .row(i)
                .iter()
                .zip(input)
                .map(|(&w, &a)| w * a)
                .sum();
            dot + self.bias[i]
        }));
    }

    fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.outputs == 0 {
            return Err(Error::Model("layer with zero width".into()));
        }
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Model(format!(
                "layer {}x{} has {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

/// Feed-forward classifier: affine layers with ReLU between hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network<F> {
    layers: Vec<Layer<F>>,
}

impl<F: Real> Network<F> {
    /// Randomly initialized network with layer widths `dims`
    /// (input, hidden..., classes).
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Model("need at least input and output widths".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::init(w[0], w[1], derive_seed(seed, "layer", i as u64)))
            .collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer<F>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Model("no layers".into()));
        }
        for layer in &layers {
            layer.validate()?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Model(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer<F>> {
        self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn freeze_flags(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.frozen).collect()
    }

    pub fn set_freeze_flags(&mut self, flags: &[bool]) -> Result<()> {
        if flags.len() != self.layers.len() {
            return Err(Error::Model(format!(
                "{} freeze flags for {} layers",
                flags.len(),
                self.layers.len()
            )));
        }
        for (layer, &f) in self.layers.iter_mut().zip(flags) {
            layer.frozen = f;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.frozen)
            .map(Layer::param_count)
            .sum()
    }

    /// Pre-softmax activations of the final layer.
    pub fn forward(&self, x: &[F]) -> Result<Vec<F>> {
        self.check_input(x.len())?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut next);
            if i != last {
                relu_in_place(&mut next);
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    /// Forward pass from a double-precision feature vector.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<F>> {
        let x: Vec<F> = x.iter().map(|&v| F::from_f64(v)).collect();
        self.forward(&x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictionVector> {
        softmax(&self.logits(x)?)
    }

    /// Activations entering every layer: `acts[0] = x`, `acts[i]` is the
    /// ReLU output of layer `i - 1`. The last element holds the logits.
    pub(crate) fn forward_trace(&self, x: &[F]) -> Result<Vec<Vec<F>>> {
        self.check_input(x.len())?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(&acts[i], &mut out);
            if i != last {
                relu_in_place(&mut out);
            }
            acts.push(out);
        }
        Ok(acts)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                actual: len,
            });
        }
        Ok(())
    }
}

fn relu_in_place<F: Real>(v: &mut [F]) {
    for a in v {
        if *a < F::zero() {
            *a = F::zero();
        }
    }
}

/// Numerically stable softmax, computed in double precision.
pub fn softmax<F: Real>(logits: &[F]) -> Result<PredictionVector> {
    if logits.is_empty() {
        return Err(Error::ClassCount);
    }
    let z: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("logits"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(PredictionVector::new_unchecked(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

/// `-ln p_y`.
pub fn cross_entropy(pred: &PredictionVector, y: usize) -> Result<f64> {
    let p = *pred.probs().get(y).ok_or(Error::Label {
        label: y,
        classes: pred.len(),
    })?;
    Ok(-p.ln())
}
