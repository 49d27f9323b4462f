use serde::{Deserialize, Serialize};

use crate::nn::PredictionVector;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the
/// logit so saturated confidences stay finite.
pub const PROB_CLAMP: f64 = 1e-7;

/// Componentwise logit of a clamped prediction vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaledVector(pub Vec<f64>);

impl ScaledVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

pub fn scale(pred: &PredictionVector) -> ScaledVector {
    ScaledVector(pred.probs().iter().map(|&p| logit(p)).collect())
}
