use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{Ablation, AttackKind, Control, ExperimentConfig};
use super::report::{summarize_rows, write_json, write_manifest_sidecar, write_report, AttackReport, MetricRules, ScoreRow, SkippedPair};
use crate::attacks::{
    adapted_lira_from_views, direct_lira_from_views, global_tmi_from_views, query_views, tmi_score_from_views,
    topk_mask, GlobalChallenge, MetaArch, ShadowObservation, ViewConfig,
};
use crate::datasets::{
    derive_task_with, designate_challenges, make_pretrain_spec, sample_excluding, sample_population, ChallengeSet,
    Dataset, DistributionSpec,
};
use crate::error::{Error, Result};
use crate::nn::{accuracy, PredictionVector};
use crate::par::{try_map_range, Execution};
use crate::rng::derive_seed;
use crate::shadow::{half_subset, rotate_targets, train_shadow_models, AttackerView, ShadowEnsemble};

/// Everything the data stage produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub pretrain_spec: DistributionSpec,
    pub downstream_spec: DistributionSpec,
    pub population: Dataset,
    pub challenge: ChallengeSet,
}

fn stage<T>(name: &'static str, seed: u64, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Stage {
        stage: name,
        seed,
        source: Box::new(e),
    })
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let build = || -> Result<ExperimentData> {
        let pretrain_spec = make_pretrain_spec(&cfg.spec_params())?;
        let population = sample_population(&pretrain_spec, cfg.data.pool_size, cfg.seed("population"))?;
        let challenge = designate_challenges(&population, cfg.data.challenges, cfg.seed("challenges"))?;
        let downstream_spec = derive_task_with(
            &pretrain_spec,
            cfg.downstream.kind,
            cfg.downstream.classes,
            cfg.seed("task"),
        )?;
        Ok(ExperimentData {
            pretrain_spec,
            downstream_spec,
            population,
            challenge,
        })
    };
    stage("data", cfg.seed("spec"), build())
}

/// Writes the specs as JSON and the pool and challenge points as CSV.
pub fn save_data(data: &ExperimentData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.pretrain_spec.save_json(&dir.join("pretrain_spec.json"))?;
    data.downstream_spec.save_json(&dir.join("downstream_spec.json"))?;
    data.population.write_csv(&dir.join("population.csv"))?;
    Dataset::new(data.population.class_count(), data.challenge.points.clone())?
        .write_csv(&dir.join("challenges.csv"))
}

/// Reads back a directory written by [`save_data`].
pub fn load_data(dir: &Path) -> Result<ExperimentData> {
    let pretrain_spec = DistributionSpec::load_json(&dir.join("pretrain_spec.json"))?;
    let downstream_spec = DistributionSpec::load_json(&dir.join("downstream_spec.json"))?;
    let classes = Some(pretrain_spec.class_count);
    let population = Dataset::read_csv(&dir.join("population.csv"), classes)?;
    let challenge = ChallengeSet {
        points: Dataset::read_csv(&dir.join("challenges.csv"), classes)?.into_points(),
    };
    Ok(ExperimentData {
        pretrain_spec,
        downstream_spec,
        population,
        challenge,
    })
}

pub fn train_ensemble(cfg: &ExperimentConfig, data: &ExperimentData, exec: Execution) -> Result<ShadowEnsemble> {
    let seed = cfg.seed("shadows");
    stage(
        "shadows",
        seed,
        train_shadow_models(
            &data.population,
            &data.challenge,
            &data.downstream_spec,
            &cfg.shadow_config(),
            seed,
            exec,
        ),
    )
}

/// Attack-stage parameters; ablations vary these over one ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSettings {
    pub attacks: Vec<AttackKind>,
    pub views: ViewConfig,
    pub meta_arch: MetaArch,
    pub global_arch: MetaArch,
    /// Applied to finetuned-model outputs only; the direct baseline reads
    /// the pretrained models unmasked.
    pub topk: Option<usize>,
    pub lambda_reg: f64,
    pub control: Control,
    pub control_seed: u64,
    pub fpr_targets: Vec<f64>,
    pub test_size: usize,
    pub test_seed: u64,
    pub manifest_hash: String,
    pub tag: Option<String>,
}

impl AttackSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            attacks: cfg.attacks.clone(),
            views: cfg.view_config(),
            meta_arch: cfg.meta_arch.clone(),
            global_arch: cfg.global_arch.clone(),
            topk: cfg.topk,
            lambda_reg: cfg.lambda_reg,
            control: cfg.control,
            control_seed: cfg.seed("control"),
            fpr_targets: cfg.fpr_targets.clone(),
            test_size: cfg.data.test_size,
            test_seed: cfg.seed("test"),
            manifest_hash: cfg.manifest_hash()?,
            tag: None,
        })
    }
}

type Views = Vec<Vec<Vec<PredictionVector>>>;

/// Views of every challenge point from every entry, indexed
/// `[entry][challenge][view]`.
struct ViewCache {
    finetuned: Views,
    pretrained: Option<Views>,
}

fn build_cache(ensemble: &ShadowEnsemble, settings: &AttackSettings, exec: Execution) -> Result<ViewCache> {
    let need_pretrained = settings.attacks.contains(&AttackKind::LiraDirect);
    let points = &ensemble.challenge.points;
    let per_entry = try_map_range(exec, ensemble.len(), |e| -> Result<_> {
        let entry = &ensemble.entries[e];
        let finetuned = points
            .iter()
            .map(|p| {
                let views = query_views(&entry.finetuned, &p.x, &settings.views)?;
                match settings.topk {
                    Some(k) => views.iter().map(|v| topk_mask(v, k)).collect(),
                    None => Ok(views),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let pretrained = if need_pretrained {
            Some(
                points
                    .iter()
                    .map(|p| query_views(&entry.pretrained, &p.x, &settings.views))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok((finetuned, pretrained))
    })?;
    let (finetuned, pretrained): (Views, Vec<Option<_>>) = per_entry.into_iter().unzip();
    Ok(ViewCache {
        finetuned,
        pretrained: if need_pretrained {
            Some(pretrained.into_iter().map(Option::unwrap_or_default).collect())
        } else {
            None
        },
    })
}

fn observations<'a>(
    view: &AttackerView<'_>,
    id: u64,
    cache: &'a Views,
    challenge: usize,
) -> Vec<ShadowObservation<'a>> {
    (0..view.len())
        .map(|j| ShadowObservation {
            member: view.membership(j, id).is_in(),
            views: &cache[view.ensemble_index(j)][challenge],
        })
        .collect()
}

enum PairOutcome {
    Skipped(String),
    Scored(Vec<f64>),
}

/// Mean held-out accuracy of the finetuned models.
pub fn downstream_accuracy(ensemble: &ShadowEnsemble, test_size: usize, seed: u64, exec: Execution) -> Result<f64> {
    let exclude: HashSet<u64> = ensemble.population.ids().collect();
    let test = sample_excluding(&ensemble.manifest.downstream_spec, test_size, seed, &exclude)?;
    let accs = try_map_range(exec, ensemble.len(), |e| accuracy(&ensemble.entries[e].finetuned, &test))?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Ground-truth member sets of each entry when it plays the target.
fn target_member_sets(ensemble: &ShadowEnsemble, settings: &AttackSettings) -> Vec<BTreeSet<u64>> {
    match settings.control {
        Control::None => ensemble
            .entries
            .iter()
            .map(|e| e.pretrain_member_ids.clone())
            .collect(),
        Control::ShuffledMembership => (0..ensemble.len())
            .map(|t| half_subset(&ensemble.population, derive_seed(settings.control_seed, "decoy", t as u64)).1)
            .collect(),
    }
}

/// Runs every configured attack on every (target, challenge) pair of the
/// rotation.
pub fn attack_ensemble(ensemble: &ShadowEnsemble, settings: &AttackSettings, exec: Execution) -> Result<AttackReport> {
    let cache = build_cache(ensemble, settings, exec)?;
    let n = ensemble.len();
    let c = ensemble.challenge.len();
    let points = &ensemble.challenge.points;
    let views: Vec<AttackerView<'_>> = rotate_targets(ensemble).map(|(_, v)| v).collect();

    let pairs = try_map_range(exec, n * c, |idx| -> Result<PairOutcome> {
        let (t, ci) = (idx / c, idx % c);
        let point = &points[ci];
        let obs = observations(&views[t], point.id, &cache.finetuned, ci);
        let n_in = obs.iter().filter(|o| o.member).count();
        let n_out = obs.len() - n_in;
        if n_in < 2 || n_out < 2 {
            return Ok(PairOutcome::Skipped(format!(
                "degenerate split: {n_in} IN, {n_out} OUT attacker models"
            )));
        }
        let target_views = &cache.finetuned[t][ci];
        let mut scores = Vec::with_capacity(settings.attacks.len());
        for attack in &settings.attacks {
            scores.push(match attack {
                AttackKind::Tmi => tmi_score_from_views(target_views, &obs, &settings.meta_arch, point.id)?,
                AttackKind::LiraAdapted => {
                    adapted_lira_from_views(target_views, &obs, settings.lambda_reg, point.id)?.log_ratio
                }
                AttackKind::LiraDirect => {
                    let pre = cache.pretrained.as_ref().expect("pretrained views cached");
                    let pre_obs = observations(&views[t], point.id, pre, ci);
                    direct_lira_from_views(&pre[t][ci], point.y, &pre_obs, settings.lambda_reg, point.id)?.log_ratio
                }
                // Filled in below from the per-target global model.
                AttackKind::TmiGlobal => f64::NAN,
            });
        }
        Ok(PairOutcome::Scored(scores))
    })?;

    let global_scores: Option<Vec<BTreeMap<u64, f64>>> = if settings.attacks.contains(&AttackKind::TmiGlobal) {
        Some(try_map_range(exec, n, |t| -> Result<BTreeMap<u64, f64>> {
            let challenges: Vec<GlobalChallenge<'_>> = (0..c)
                .filter(|ci| matches!(pairs[t * c + ci], PairOutcome::Scored(_)))
                .map(|ci| GlobalChallenge {
                    challenge_id: points[ci].id,
                    target_views: &cache.finetuned[t][ci],
                    shadows: observations(&views[t], points[ci].id, &cache.finetuned, ci),
                })
                .collect();
            if challenges.is_empty() {
                return Ok(BTreeMap::new());
            }
            Ok(global_tmi_from_views(&challenges, &settings.global_arch)?.into_iter().collect())
        })?)
    } else {
        None
    };

    let members = target_member_sets(ensemble, settings);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (idx, outcome) in pairs.into_iter().enumerate() {
        let (t, ci) = (idx / c, idx % c);
        let id = points[ci].id;
        match outcome {
            PairOutcome::Skipped(reason) => {
                log::info!("skipping challenge {id} for target {t}: {reason}");
                skipped.push(SkippedPair {
                    challenge_id: id,
                    target_index: t,
                    reason,
                });
            }
            PairOutcome::Scored(scores) => {
                let bit = members[t].contains(&id) as u8;
                for (attack, score) in settings.attacks.iter().zip(scores) {
                    let score = match attack {
                        AttackKind::TmiGlobal => global_scores.as_ref().expect("global scores")[t][&id],
                        _ => score,
                    };
                    rows.push(ScoreRow {
                        challenge_id: id,
                        target_index: t,
                        attack_name: attack.name().to_string(),
                        score,
                        true_membership_bit: bit,
                    });
                }
            }
        }
    }

    let summaries = summarize_rows(&rows, &settings.fpr_targets)?;
    let uses_meta = settings.attacks.contains(&AttackKind::Tmi) && !rows.is_empty();
    Ok(AttackReport {
        manifest_hash: settings.manifest_hash.clone(),
        tag: settings.tag.clone(),
        complete: true,
        row_count: rows.len(),
        expected_rows: n * c * settings.attacks.len(),
        rows,
        skipped,
        summaries,
        downstream_accuracy: downstream_accuracy(ensemble, settings.test_size, settings.test_seed, exec)?,
        views_per_query: settings.views.count,
        meta_rows_per_point: uses_meta.then(|| settings.views.count * (n - 1)),
        metric_rules: MetricRules::default(),
    })
}

#[derive(Serialize)]
struct IncompleteMarker<'a> {
    complete: bool,
    error_kind: &'a str,
    error: String,
}

fn mark_incomplete(dir: &Path, err: &Error) {
    let marker = IncompleteMarker {
        complete: false,
        error_kind: err.kind(),
        error: err.to_string(),
    };
    if fs::create_dir_all(dir).is_ok() {
        let _ = write_json(&marker, &dir.join("incomplete.json"));
    }
}

/// Writes the resolved config next to a report.
pub fn write_run_outputs(cfg: &ExperimentConfig, report: &AttackReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(cfg, &dir.join("config.json"))?;
    write_manifest_sidecar(&report.manifest_hash, dir)?;
    write_report(report, dir)
}

fn with_outputs<T>(cfg: &ExperimentConfig, run: impl FnOnce() -> Result<T>) -> Result<T> {
    let result = run();
    if let (Err(e), Some(dir)) = (&result, &cfg.output_dir) {
        mark_incomplete(dir, e);
    }
    result
}

/// Data, shadows, attacks and metrics for one config. Writes outputs when
/// `cfg.output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AttackReport> {
    run_experiment_with(cfg, Execution::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, exec: Execution) -> Result<AttackReport> {
    cfg.validate()?;
    with_outputs(cfg, || {
        let data = prepare_data(cfg)?;
        let ensemble = train_ensemble(cfg, &data, exec)?;
        let report = run_on_ensemble(cfg, &ensemble, exec)?;
        if let Some(dir) = &cfg.output_dir {
            write_run_outputs(cfg, &report, dir)?;
        }
        Ok(report)
    })
}

/// Attack stage of `cfg` on an existing ensemble.
pub fn run_on_ensemble(cfg: &ExperimentConfig, ensemble: &ShadowEnsemble, exec: Execution) -> Result<AttackReport> {
    let settings = AttackSettings::from_config(cfg)?;
    stage("attack", cfg.seed("views"), attack_ensemble(ensemble, &settings, exec))
}

/// One settings arm per ablation value, tagged.
pub fn ablation_arms(cfg: &ExperimentConfig, ablation: &Ablation) -> Result<Vec<AttackSettings>> {
    let base = AttackSettings::from_config(cfg)?;
    let arms = match ablation {
        Ablation::Topk(ks) => ks
            .iter()
            .map(|&k| AttackSettings {
                topk: Some(k),
                tag: Some(format!("topk_{k}")),
                ..base.clone()
            })
            .collect(),
        Ablation::MetaArch(arches) => arches
            .iter()
            .map(|a| {
                a.validate()?;
                Ok(AttackSettings {
                    meta_arch: a.clone(),
                    tag: Some(format!("meta_arch_{}", a.label())),
                    ..base.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?,
        Ablation::Augmentations(ms) => ms
            .iter()
            .map(|&m| {
                if m == 0 {
                    return Err(Error::ExperimentConfig("augmentation count must be positive".into()));
                }
                Ok(AttackSettings {
                    views: ViewConfig { count: m, ..base.views },
                    tag: Some(format!("augmentations_{m}")),
                    ..base.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if arms.is_empty() {
        return Err(Error::ExperimentConfig("ablation has no arms".into()));
    }
    Ok(arms)
}

/// Trains one ensemble and runs every arm of `ablation` on it. Arm outputs
/// go to `<output_dir>/<tag>/`.
pub fn run_ablation(cfg: &ExperimentConfig, ablation: &Ablation, exec: Execution) -> Result<Vec<AttackReport>> {
    cfg.validate()?;
    let arms = ablation_arms(cfg, ablation)?;
    with_outputs(cfg, || {
        let data = prepare_data(cfg)?;
        let ensemble = train_ensemble(cfg, &data, exec)?;
        ablate_ensemble(cfg, &ensemble, &arms, exec)
    })
}

pub fn ablate_ensemble(
    cfg: &ExperimentConfig,
    ensemble: &ShadowEnsemble,
    arms: &[AttackSettings],
    exec: Execution,
) -> Result<Vec<AttackReport>> {
    let mut reports = Vec::with_capacity(arms.len());
    for arm in arms {
        let report = stage("attack", arm.views.seed, attack_ensemble(ensemble, arm, exec))?;
        if let Some(dir) = &cfg.output_dir {
            write_run_outputs(cfg, &report, &dir.join(arm.tag.as_deref().unwrap_or("arm")))?;
        }
        reports.push(report);
    }
    if let Some(dir) = &cfg.output_dir {
        let index: BTreeMap<String, _> = reports
            .iter()
            .map(|r| (r.tag.clone().unwrap_or_default(), &r.summaries))
            .collect();
        write_json(&index, &dir.join("ablation.json"))?;
        write_manifest_sidecar(&cfg.manifest_hash()?, dir)?;
    }
    Ok(reports)
}
