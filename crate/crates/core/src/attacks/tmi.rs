use super::{
    check_split, observations, query_views, scale, shadow_views, train_metaclassifier, MetaArch,
    MetaDataset, MetaModel, MetaRow, ShadowObservation, ViewConfig,
};
use crate::datasets::Point;
use crate::error::{Error, Result};
use crate::nn::PredictionVector;
use crate::rng::derive_seed;
use crate::shadow::{AttackerView, TargetView};

fn rows_of(shadows: &[ShadowObservation<'_>]) -> Vec<MetaRow> {
    shadows
        .iter()
        .flat_map(|s| {
            s.views.iter().map(|v| MetaRow {
                features: scale(v),
                member: s.member,
            })
        })
        .collect()
}

/// One row per (shadow model, view): the scaled prediction and the
/// model's membership bit for the point.
pub fn build_meta_dataset_from_views(
    shadows: &[ShadowObservation<'_>],
    challenge_id: u64,
) -> Result<MetaDataset> {
    check_split(shadows, challenge_id)?;
    Ok(MetaDataset {
        rows: rows_of(shadows),
        challenge_id: Some(challenge_id),
        shadow_count: shadows.len(),
    })
}

/// Mean metaclassifier score over the target's views.
pub fn mean_view_score(model: &MetaModel, target_views: &[PredictionVector]) -> Result<f64> {
    if target_views.is_empty() {
        return Err(Error::EmptyData("target views"));
    }
    let mut total = 0.0;
    for v in target_views {
        total += model.scaled_score(&scale(v))?;
    }
    Ok(total / target_views.len() as f64)
}

pub fn tmi_score_from_views(
    target_views: &[PredictionVector],
    shadows: &[ShadowObservation<'_>],
    arch: &MetaArch,
    challenge_id: u64,
) -> Result<f64> {
    let data = build_meta_dataset_from_views(shadows, challenge_id)?;
    let arch = MetaArch {
        seed: derive_seed(arch.seed, "tmi", challenge_id),
        ..arch.clone()
    };
    mean_view_score(&train_metaclassifier(&data, &arch)?, target_views)
}

/// Inputs of the global attack for one challenge point.
#[derive(Debug, Clone)]
pub struct GlobalChallenge<'a> {
    pub challenge_id: u64,
    pub target_views: &'a [PredictionVector],
    pub shadows: Vec<ShadowObservation<'a>>,
}

/// A single metaclassifier trained on the rows of every challenge point,
/// queried per point. Scores are returned in input order.
pub fn global_tmi_from_views(challenges: &[GlobalChallenge<'_>], arch: &MetaArch) -> Result<Vec<(u64, f64)>> {
    if challenges.is_empty() {
        return Err(Error::EmptyData("challenge list"));
    }
    let data = MetaDataset {
        rows: challenges.iter().flat_map(|c| rows_of(&c.shadows)).collect(),
        challenge_id: None,
        shadow_count: challenges.iter().map(|c| c.shadows.len()).max().unwrap_or(0),
    };
    let arch = MetaArch {
        seed: derive_seed(arch.seed, "tmi-global", 0),
        ..arch.clone()
    };
    let model = train_metaclassifier(&data, &arch)?;
    challenges
        .iter()
        .map(|c| Ok((c.challenge_id, mean_view_score(&model, c.target_views)?)))
        .collect()
}

pub fn build_meta_dataset(point: &Point, attacker: &AttackerView<'_>, views: &ViewConfig) -> Result<MetaDataset> {
    let raw = shadow_views(attacker, point, views, false)?;
    build_meta_dataset_from_views(&observations(&raw), point.id)
}

pub fn tmi_score(
    target: &TargetView<'_>,
    point: &Point,
    attacker: &AttackerView<'_>,
    views: &ViewConfig,
    arch: &MetaArch,
) -> Result<f64> {
    let target_views = query_views(target.finetuned, &point.x, views)?;
    let raw = shadow_views(attacker, point, views, false)?;
    tmi_score_from_views(&target_views, &observations(&raw), arch, point.id)
}

pub fn global_tmi(
    target: &TargetView<'_>,
    points: &[Point],
    attacker: &AttackerView<'_>,
    views: &ViewConfig,
    arch: &MetaArch,
) -> Result<Vec<(u64, f64)>> {
    let mut target_views = Vec::with_capacity(points.len());
    let mut raws = Vec::with_capacity(points.len());
    for p in points {
        target_views.push(query_views(target.finetuned, &p.x, views)?);
        raws.push(shadow_views(attacker, p, views, false)?);
    }
    let challenges: Vec<GlobalChallenge<'_>> = points
        .iter()
        .zip(&target_views)
        .zip(&raws)
        .map(|((p, tv), raw)| GlobalChallenge {
            challenge_id: p.id,
            target_views: tv,
            shadows: observations(raw),
        })
        .collect();
    global_tmi_from_views(&challenges, arch)
}
