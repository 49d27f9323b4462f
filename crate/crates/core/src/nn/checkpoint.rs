use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Network, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Versioned JSON form of a [`Network`]. Values are stored as `f64`, which
/// represents `f32` parameters exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub layer_dims: Vec<usize>,
    pub freeze_flags: Vec<bool>,
    /// Per-layer weight matrices, row-major `[outputs x inputs]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl<F: Real> From<&Network<F>> for Checkpoint {
    fn from(net: &Network<F>) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            layer_dims: net.layer_dims(),
            freeze_flags: net.freeze_flags(),
            weights: net
                .layers()
                .iter()
                .map(|l| l.weights.iter().map(|w| w.as_f64()).collect())
                .collect(),
            biases: net
                .layers()
                .iter()
                .map(|l| l.bias.iter().map(|b| b.as_f64()).collect())
                .collect(),
        }
    }
}

impl Checkpoint {
    pub fn into_network<F: Real>(self) -> Result<Network<F>> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        let n = self.layer_dims.len().saturating_sub(1);
        if n == 0
            || self.freeze_flags.len() != n
            || self.weights.len() != n
            || self.biases.len() != n
        {
            return Err(Error::Model(format!(
                "checkpoint declares {} layers but carries {} flags, {} weight and {} bias arrays",
                n,
                self.freeze_flags.len(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        let layers = (0..n)
            .map(|i| Layer {
                inputs: self.layer_dims[i],
                outputs: self.layer_dims[i + 1],
                weights: self.weights[i].iter().map(|&v| F::from_f64(v)).collect(),
                bias: self.biases[i].iter().map(|&v| F::from_f64(v)).collect(),
                frozen: self.freeze_flags[i],
            })
            .collect();
        Network::from_layers(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl<F: Real> Network<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = Checkpoint::from(self).to_json()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)?.into_network()
    }
}
