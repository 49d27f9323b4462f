//! Attack evaluation: ROC curve, AUC, TPR at fixed FPR, balanced accuracy.
//!
//! A score `s` is classified as a member at threshold `t` when `s >= t`.
//! All scores equal to a threshold cross it together.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve sorted by FPR, from `(0, 0)` at threshold `+inf` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "both classes required ({positives} positive, {negatives} negative)"
        )));
    }
    Ok((positives, negatives))
}

/// Threshold sweep over distinct scores in descending order.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push(RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }
    Ok(RocCurve {
        points,
        positives,
        negatives,
    })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Largest TPR among thresholds whose FPR does not exceed `fpr_target`.
/// No interpolation between curve points.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// Best `(TPR + TNR) / 2` over all sweep thresholds.
pub fn balanced_accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(balanced_accuracy_from_curve(&roc(scores, labels)?))
}

pub fn balanced_accuracy_from_curve(curve: &RocCurve) -> f64 {
    curve
        .points
        .iter()
        .map(|p| (p.tpr + 1.0 - p.fpr) / 2.0)
        .fold(0.0, f64::max)
}

/// Summary statistics of one attack's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc: f64,
    pub balanced_accuracy: f64,
    pub tpr_at_fpr_0p001: f64,
    pub tpr_at_fpr_0p01: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn summarize(scores: &[f64], labels: &[bool]) -> Result<Summary> {
    let curve = roc(scores, labels)?;
    Ok(Summary::from_curve(&curve))
}

impl Summary {
    pub fn from_curve(curve: &RocCurve) -> Self {
        Summary {
            auc: auc(curve),
            balanced_accuracy: balanced_accuracy_from_curve(curve),
            tpr_at_fpr_0p001: tpr_at_fpr(curve, 0.001),
            tpr_at_fpr_0p01: tpr_at_fpr(curve, 0.01),
            n_pos: curve.positives,
            n_neg: curve.negatives,
        }
    }
}

impl RocCurve {
    /// Writes `fpr,tpr,threshold` rows, optionally preceded by a `#` header
    /// comment.
    pub fn write_csv(&self, path: &Path, header_comment: Option<&str>) -> Result<()> {
        let mut out = String::new();
        if let Some(c) = header_comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("fpr,tpr,threshold\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::rng;

    /// Confusion-matrix rates at every distinct threshold plus `+inf`,
    /// recomputed from scratch per threshold.
    fn brute_force_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64, f64)> {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        thresholds.insert(0, f64::INFINITY);
        thresholds
            .into_iter()
            .map(|t| {
                let mut tp = 0.0;
                let mut fp = 0.0;
                for (s, &l) in scores.iter().zip(labels) {
                    if *s >= t {
                        if l {
                            tp += 1.0;
                        } else {
                            fp += 1.0;
                        }
                    }
                }
                (fp / neg, tp / pos, t)
            })
            .collect()
    }

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
            for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn random_instance(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
        let mut r = rng(seed);
        loop {
            // Coarse grid forces ties.
            let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..12) as f64) / 4.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        let curve = roc(&scores, &labels).unwrap();
        assert!(curve.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&curve), 1.0);
        assert_eq!(tpr_at_fpr(&curve, 0.0), 1.0);
        assert_eq!(balanced_accuracy(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn all_equal_scores() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, false, true];
        let curve = roc(&scores, &labels).unwrap();
        assert_eq!(curve.points.len(), 2);
        assert_eq!((curve.points[0].fpr, curve.points[0].tpr), (0.0, 0.0));
        assert_eq!((curve.points[1].fpr, curve.points[1].tpr), (1.0, 1.0));
        assert_eq!(auc(&curve), 0.5);
        assert_eq!(tpr_at_fpr(&curve, 0.0), 0.0);
        assert_eq!(tpr_at_fpr(&curve, 1.0), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        assert!(balanced_accuracy(&[0.1, 0.2], &[false, false]).is_err());
        assert!(roc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn matches_brute_force_oracles() {
        for seed in 0..100 {
            let (scores, labels) = random_instance(seed, 50);
            let curve = roc(&scores, &labels).unwrap();
            let oracle = brute_force_curve(&scores, &labels);
            let got: Vec<(f64, f64, f64)> =
                curve.points.iter().map(|p| (p.fpr, p.tpr, p.threshold)).collect();
            assert_eq!(got, oracle, "seed {seed}");
            assert!((auc(&curve) - mann_whitney(&scores, &labels)).abs() < 1e-12);
            for target in [0.0, 0.001, 0.01, 0.1, 0.33, 1.0] {
                let brute = oracle
                    .iter()
                    .filter(|p| p.0 <= target)
                    .map(|p| p.1)
                    .fold(0.0, f64::max);
                assert_eq!(tpr_at_fpr(&curve, target), brute);
            }
            let brute_bacc = oracle
                .iter()
                .map(|p| (p.1 + 1.0 - p.0) / 2.0)
                .fold(0.0, f64::max);
            assert_eq!(balanced_accuracy(&scores, &labels).unwrap(), brute_bacc);
        }
    }

    #[test]
    fn uninformative_scores_balanced_accuracy_near_half() {
        let mut r = rng(17);
        let scores: Vec<f64> = (0..2000).map(|_| r.random::<f64>()).collect();
        let labels: Vec<bool> = (0..2000).map(|_| r.random_bool(0.5)).collect();
        let b = balanced_accuracy(&scores, &labels).unwrap();
        assert!((0.45..=0.6).contains(&b), "balanced accuracy {b}");
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(seed in any::<u64>()) {
            let (scores, labels) = random_instance(seed, 40);
            let base = auc(&roc(&scores, &labels).unwrap());
            let expd: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
            prop_assert!((auc(&roc(&expd, &labels).unwrap()) - base).abs() < 1e-12);
            prop_assert!((auc(&roc(&affine, &labels).unwrap()) - base).abs() < 1e-12);
        }

        #[test]
        fn label_flip_duality(seed in any::<u64>()) {
            let (scores, labels) = random_instance(seed, 30);
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let a = auc(&roc(&scores, &labels).unwrap());
            let b = auc(&roc(&scores, &flipped).unwrap());
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn tpr_nondecreasing_in_target(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (scores, labels) = random_instance(seed, 30);
            let curve = roc(&scores, &labels).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(tpr_at_fpr(&curve, lo) <= tpr_at_fpr(&curve, hi));
        }
    }
}
