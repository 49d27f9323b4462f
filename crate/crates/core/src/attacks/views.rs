use serde::{Deserialize, Serialize};

use crate::datasets::augment;
use crate::error::{Error, Result};
use crate::nn::{Model, PredictionVector};

/// How a challenge point is queried: `count` views, view 0 unaugmented.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub count: usize,
    pub strength: f64,
    pub seed: u64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            count: 8,
            strength: 0.1,
            seed: 0,
        }
    }
}

pub fn query_views(model: &Model, x: &[f64], cfg: &ViewConfig) -> Result<Vec<PredictionVector>> {
    if cfg.count == 0 {
        return Err(Error::Config("at least one view is required".into()));
    }
    (0..cfg.count)
        .map(|j| model.predict(&augment(x, j, cfg.strength, cfg.seed)))
        .collect()
}

/// Keeps the `k` largest confidences and spreads the remaining mass
/// equally over the other labels.
pub fn topk_mask(pred: &PredictionVector, k: usize) -> Result<PredictionVector> {
    let p = pred.probs();
    let classes = p.len();
    if k == 0 || k > classes {
        return Err(Error::Mask { k, classes });
    }
    if k == classes {
        return Ok(pred.clone());
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let kept = &order[..k];
    let mass: f64 = kept.iter().map(|&i| p[i]).sum();
    let rest = ((1.0 - mass) / (classes - k) as f64).max(0.0);
    let mut out = vec![rest; classes];
    for &i in kept {
        out[i] = p[i];
    }
    Ok(PredictionVector::new_unchecked(out))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::nn::softmax;

    #[test]
    fn single_view_is_raw_prediction() {
        let model = Model::new(&[3, 4, 2], 1).unwrap();
        let x = [0.3, -0.2, 1.0];
        let cfg = ViewConfig {
            count: 1,
            ..ViewConfig::default()
        };
        assert_eq!(query_views(&model, &x, &cfg).unwrap(), vec![model.predict(&x).unwrap()]);
    }

    #[test]
    fn views_are_deterministic_and_distinct() {
        let model = Model::new(&[3, 4, 2], 1).unwrap();
        let x = [0.3, -0.2, 1.0];
        let cfg = ViewConfig::default();
        let a = query_views(&model, &x, &cfg).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, query_views(&model, &x, &cfg).unwrap());
        assert_eq!(a[0], model.predict(&x).unwrap());
        assert_ne!(a[1], a[0]);
        assert!(query_views(&model, &x, &ViewConfig { count: 0, ..cfg }).is_err());
    }

    #[test]
    fn mask_examples() {
        let p = PredictionVector::new(vec![0.6, 0.3, 0.08, 0.02]).unwrap();
        assert_eq!(topk_mask(&p, 4).unwrap(), p);
        let m = topk_mask(&p, 1).unwrap();
        let r = 0.4 / 3.0;
        for (got, want) in m.probs().iter().zip([0.6, r, r, r]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(matches!(topk_mask(&p, 0), Err(Error::Mask { k: 0, classes: 4 })));
        assert!(topk_mask(&p, 5).is_err());
    }

    #[test]
    fn mask_ties_keep_lower_index() {
        let p = PredictionVector::new(vec![0.2, 0.4, 0.4]).unwrap();
        let m = topk_mask(&p, 1).unwrap();
        assert_eq!(m.probs()[1], 0.4);
        assert!((m.probs()[2] - 0.3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mask_preserves_mass_and_argmax(logits in prop::collection::vec(-8.0f64..8.0, 2..10), k in 1usize..10) {
            let p = softmax(&logits).unwrap();
            let k = k.min(p.len());
            let m = topk_mask(&p, k).unwrap();
            prop_assert!((m.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(m.argmax(), p.argmax());
        }
    }
}
