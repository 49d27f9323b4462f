//! Membership inference attacks against finetuned models.
//!
//! Every attack has a model-facing entry point that queries the target and
//! the shadow models, and a `*_from_views` form that works on precomputed
//! prediction vectors so callers can share one set of queries between
//! attacks.

mod gaussian;
mod lira;
mod meta;
mod scaling;
mod tmi;
mod views;

pub use gaussian::{fit_gaussian, GaussianFit};
pub use lira::{
    adapted_lira, adapted_lira_from_views, direct_lira, direct_lira_from_views, lira_from_statistics,
    LikelihoodRatio,
};
pub use meta::{train_metaclassifier, KRule, MetaArch, MetaDataset, MetaKind, MetaModel, MetaRow};
pub use scaling::{scale, ScaledVector, PROB_CLAMP};
pub use tmi::{
    build_meta_dataset, build_meta_dataset_from_views, global_tmi, global_tmi_from_views, tmi_score,
    tmi_score_from_views, GlobalChallenge,
};
pub use views::{query_views, topk_mask, ViewConfig};

use crate::datasets::Point;
use crate::nn::PredictionVector;
use crate::shadow::AttackerView;

/// One attacker-side shadow model's outputs on a challenge point.
#[derive(Debug, Clone, Copy)]
pub struct ShadowObservation<'a> {
    pub member: bool,
    pub views: &'a [PredictionVector],
}

fn split_counts(shadows: &[ShadowObservation<'_>]) -> (usize, usize) {
    let n_in = shadows.iter().filter(|s| s.member).count();
    (n_in, shadows.len() - n_in)
}

fn check_split(shadows: &[ShadowObservation<'_>], challenge_id: u64) -> crate::Result<()> {
    let (n_in, n_out) = split_counts(shadows);
    if n_in == 0 || n_out == 0 {
        return Err(crate::Error::DegenerateSplit {
            challenge_id,
            n_in,
            n_out,
        });
    }
    Ok(())
}

/// Membership bit and views of every attacker shadow model on `point`,
/// from the finetuned or the pretrained models.
pub(crate) fn shadow_views(
    attacker: &AttackerView<'_>,
    point: &Point,
    views: &ViewConfig,
    pretrained: bool,
) -> crate::Result<Vec<(bool, Vec<PredictionVector>)>> {
    (0..attacker.len())
        .map(|j| {
            let model = if pretrained {
                attacker.pretrained(j)
            } else {
                attacker.finetuned(j)
            };
            Ok((
                attacker.membership(j, point.id).is_in(),
                query_views(model, &point.x, views)?,
            ))
        })
        .collect()
}

pub(crate) fn observations(raw: &[(bool, Vec<PredictionVector>)]) -> Vec<ShadowObservation<'_>> {
    raw.iter()
        .map(|(member, views)| ShadowObservation {
            member: *member,
            views,
        })
        .collect()
}
