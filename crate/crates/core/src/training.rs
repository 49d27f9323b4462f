//! Transfer-learning strategies: pretraining, head replacement, partial
//! unfreezing and DP-SGD training of the classification head.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Gradients, Layer, Model, Network, Real, TrainConfig};
use crate::rng::{derive_seed, derive_seed2, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum StrategyKind {
    /// Only the new head is trained.
    FeatureExtraction,
    /// The last `k` layers (head included) are trained.
    LastKLayers(usize),
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneStrategy {
    pub kind: StrategyKind,
    #[serde(default)]
    pub head_init_seed: u64,
}

impl FinetuneStrategy {
    pub fn new(kind: StrategyKind, head_init_seed: u64) -> Self {
        Self {
            kind,
            head_init_seed,
        }
    }

    /// Freeze flags for a network with `layers` layers.
    pub fn freeze_flags(&self, layers: usize) -> Result<Vec<bool>> {
        let trainable = match self.kind {
            StrategyKind::FeatureExtraction => 1,
            StrategyKind::LastKLayers(0) => {
                return Err(Error::Strategy("last_k_layers needs k >= 1".into()))
            }
            StrategyKind::LastKLayers(k) if k > layers => {
                return Err(Error::Strategy(format!(
                    "last_k_layers({k}) on a {layers}-layer model"
                )))
            }
            StrategyKind::LastKLayers(k) => k,
            StrategyKind::Full => layers,
        };
        Ok((0..layers).map(|i| i + trainable < layers).collect())
    }
}

/// DP-SGD parameters. The privacy budget fields are annotations only; no
/// accounting is performed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DPConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub lot_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default)]
    pub declared_epsilon: Option<f64>,
    #[serde(default)]
    pub declared_delta: Option<f64>,
}

impl DPConfig {
    pub fn validate(&self, data_len: usize) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::Config("noise_multiplier must be nonnegative".into()));
        }
        if self.lot_size == 0 || self.lot_size > data_len {
            return Err(Error::Config(format!(
                "lot_size {} must be in [1, {data_len}]",
                self.lot_size
            )));
        }
        Ok(())
    }
}

/// Instrumentation collected during [`dp_finetune_traced`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DpTrace {
    pub steps: usize,
    pub examples: usize,
    pub clipped_examples: usize,
    pub max_raw_norm: f64,
    pub max_clipped_norm: f64,
}

/// Fresh network `[d, hidden..., classes]`.
pub fn init_model(feature_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Model> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(feature_dim);
    dims.extend_from_slice(hidden);
    dims.push(classes);
    Network::new(&dims, seed)
}

/// Trains a randomly initialized model on `subset`.
pub fn pretrain(hidden: &[usize], subset: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if subset.is_empty() {
        return Err(Error::EmptyData("pretraining subset"));
    }
    let model = init_model(
        subset.feature_dim(),
        hidden,
        subset.class_count(),
        derive_seed(cfg.seed, "init", 0),
    )?;
    nn::train(model, subset, cfg)
}

/// Replaces the final layer with a freshly initialized `[hidden -> new_k]`
/// layer. Earlier layers are copied verbatim.
pub fn replace_head<F: Real>(g: &Network<F>, new_k: usize, seed: u64) -> Result<Network<F>> {
    if new_k == 0 {
        return Err(Error::ClassCount);
    }
    let mut layers: Vec<Layer<F>> = g.layers().to_vec();
    let old = layers.pop().expect("network has at least one layer");
    layers.push(Layer::init(old.inputs, new_k, seed));
    Network::from_layers(layers)
}

/// Replaces the head, applies the strategy's freeze flags and trains.
pub fn finetune(
    g: &Model,
    data: &Dataset,
    strategy: &FinetuneStrategy,
    cfg: &TrainConfig,
) -> Result<Model> {
    let flags = strategy.freeze_flags(g.layers().len())?;
    let mut model = replace_head(g, data.class_count(), strategy.head_init_seed)?;
    model.set_freeze_flags(&flags)?;
    nn::train(model, data, cfg)
}

/// DP-SGD on a new classification head over frozen pretrained features.
pub fn dp_finetune(
    g: &Model,
    data: &Dataset,
    head_init_seed: u64,
    dp: &DPConfig,
    cfg: &TrainConfig,
) -> Result<Model> {
    dp_finetune_traced(g, data, head_init_seed, dp, cfg).map(|(m, _)| m)
}

/// [`dp_finetune`] that also reports clipping statistics.
///
/// Each lot's update is `(Σ clip_C(g_i) + N(0, σ²C² I)) / |lot|` plus weight
/// decay, with lots taken sequentially over a seeded shuffle. The learning
/// rate schedule runs over `dp.epochs`.
pub fn dp_finetune_traced(
    g: &Model,
    data: &Dataset,
    head_init_seed: u64,
    dp: &DPConfig,
    cfg: &TrainConfig,
) -> Result<(Model, DpTrace)> {
    dp.validate(data.len())?;
    let flags = FinetuneStrategy::new(StrategyKind::FeatureExtraction, head_init_seed)
        .freeze_flags(g.layers().len())?;
    let mut model = replace_head(g, data.class_count(), head_init_seed)?;
    model.set_freeze_flags(&flags)?;
    nn::train::check_trainable(&model, data)?;

    let schedule = TrainConfig {
        epochs: dp.epochs,
        batch_size: dp.lot_size,
        ..cfg.clone()
    };
    schedule.validate()?;
    let noise = Normal::new(0.0, dp.noise_multiplier * dp.clip_norm)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let inputs: Vec<Vec<f32>> = data.points().iter().map(|p| nn::train::to_real(&p.x)).collect();

    let mut trace = DpTrace::default();
    let mut sum = Gradients::zeros_like(&model);
    let mut single = Gradients::zeros_like(&model);
    for epoch in 0..dp.epochs {
        let lr = schedule.lr_at(epoch)?;
        let order = nn::train::epoch_order(data.len(), schedule.shuffle_seed(epoch));
        for (step, lot) in order.chunks(dp.lot_size).enumerate() {
            sum.fill_zero();
            for &i in lot {
                single.fill_zero();
                model.accumulate_gradient(&inputs[i], data.points()[i].y, &mut single)?;
                let norm = single.l2_norm();
                trace.max_raw_norm = trace.max_raw_norm.max(norm);
                if norm > dp.clip_norm {
                    single.scale(f32::from_f64(dp.clip_norm / norm));
                    trace.clipped_examples += 1;
                }
                trace.max_clipped_norm = trace.max_clipped_norm.max(single.l2_norm());
                trace.examples += 1;
                sum.add_assign(&single);
            }
            if dp.noise_multiplier > 0.0 {
                let mut r = rng(derive_seed2(dp.noise_seed, "dp-noise", epoch as u64, step as u64));
                for v in sum.values_mut() {
                    *v += noise.sample(&mut r) as f32;
                }
            }
            model.apply_gradient(&sum, lot.len(), lr, schedule.weight_decay);
            trace.steps += 1;
        }
    }
    Ok((model, trace))
}

/// Fraction of parameters that a strategy leaves trainable.
pub fn trainable_fraction(model: &Model) -> f64 {
    model.trainable_param_count() as f64 / model.param_count() as f64
}
