use serde::{Deserialize, Serialize};

use super::scaling::logit;
use super::{
    check_split, fit_gaussian, observations, query_views, shadow_views, GaussianFit, ShadowObservation,
    ViewConfig,
};
use crate::datasets::Point;
use crate::error::Result;
use crate::nn::PredictionVector;
use crate::shadow::{AttackerView, TargetView};

/// Likelihood ratio of the IN over the OUT Gaussian, kept in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatio {
    pub log_ratio: f64,
}

impl LikelihoodRatio {
    pub fn from_fits(observed: &[f64], fit_in: &GaussianFit, fit_out: &GaussianFit) -> Result<Self> {
        Ok(Self {
            log_ratio: fit_in.log_pdf(observed)? - fit_out.log_pdf(observed)?,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.log_ratio.exp()
    }
}

/// Scaled confidence at `class` in every view.
fn statistic(views: &[PredictionVector], class: usize) -> Vec<f64> {
    views.iter().map(|v| logit(v.probs()[class])).collect()
}

pub fn lira_from_statistics(
    observed: &[f64],
    ins: &[Vec<f64>],
    outs: &[Vec<f64>],
    lambda: f64,
) -> Result<LikelihoodRatio> {
    LikelihoodRatio::from_fits(observed, &fit_gaussian(ins, lambda)?, &fit_gaussian(outs, lambda)?)
}

fn lira_at_class(
    target_views: &[PredictionVector],
    class: usize,
    shadows: &[ShadowObservation<'_>],
    lambda: f64,
    challenge_id: u64,
) -> Result<LikelihoodRatio> {
    check_split(shadows, challenge_id)?;
    let (ins, outs): (Vec<&ShadowObservation<'_>>, Vec<_>) = shadows.iter().partition(|s| s.member);
    let ins: Vec<Vec<f64>> = ins.iter().map(|s| statistic(s.views, class)).collect();
    let outs: Vec<Vec<f64>> = outs.iter().map(|s| statistic(s.views, class)).collect();
    lira_from_statistics(&statistic(target_views, class), &ins, &outs, lambda)
}

/// LiRA on finetuned models, using the label the target predicts most
/// confidently on the unaugmented point.
pub fn adapted_lira_from_views(
    target_views: &[PredictionVector],
    shadows: &[ShadowObservation<'_>],
    lambda: f64,
    challenge_id: u64,
) -> Result<LikelihoodRatio> {
    let predicted = target_views[0].argmax();
    lira_at_class(target_views, predicted, shadows, lambda, challenge_id)
}

/// LiRA on pretrained models at the point's true label.
pub fn direct_lira_from_views(
    target_views: &[PredictionVector],
    label: usize,
    shadows: &[ShadowObservation<'_>],
    lambda: f64,
    challenge_id: u64,
) -> Result<LikelihoodRatio> {
    lira_at_class(target_views, label, shadows, lambda, challenge_id)
}

pub fn adapted_lira(
    target: &TargetView<'_>,
    point: &Point,
    attacker: &AttackerView<'_>,
    views: &ViewConfig,
    lambda: f64,
) -> Result<LikelihoodRatio> {
    let target_views = query_views(target.finetuned, &point.x, views)?;
    let raw = shadow_views(attacker, point, views, false)?;
    adapted_lira_from_views(&target_views, &observations(&raw), lambda, point.id)
}

pub fn direct_lira(
    target: &TargetView<'_>,
    point: &Point,
    attacker: &AttackerView<'_>,
    views: &ViewConfig,
    lambda: f64,
) -> Result<LikelihoodRatio> {
    let target_views = query_views(target.pretrained, &point.x, views)?;
    let raw = shadow_views(attacker, point, views, true)?;
    direct_lira_from_views(&target_views, point.y, &observations(&raw), lambda, point.id)
}
