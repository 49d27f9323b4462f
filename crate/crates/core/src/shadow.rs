//! Shadow-model ensembles.
//!
//! Each entry is pretrained on a uniformly random half of the population
//! pool and finetuned on a freshly sampled downstream set. The entry's
//! member set records which pool points it was pretrained on, which makes
//! every challenge point IN for about half of the entries.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{sample_excluding, ChallengeSet, Dataset, DistributionSpec, TaskKind};
use crate::error::{Error, Result};
use crate::nn::{Model, TrainConfig};
use crate::par::{try_map_range, Execution};
use crate::rng::{derive_seed, rng};
use crate::training::{dp_finetune, finetune, pretrain, DPConfig, FinetuneStrategy, StrategyKind};

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

/// How every entry of an ensemble is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowConfig {
    /// Number of entries; one of them is the target in every rotation.
    pub shadow_count: usize,
    pub hidden: Vec<usize>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub dp: Option<DPConfig>,
    /// Size of every entry's downstream training set.
    pub finetune_size: usize,
    /// Share one pretrained model across all entries, as when finetuning a
    /// publicly hosted model.
    #[serde(default)]
    pub public_pretrained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySeeds {
    pub subset: u64,
    pub pretrain: u64,
    pub finetune_data: u64,
    pub finetune: u64,
    pub head: u64,
}

impl EntrySeeds {
    pub fn derive(master_seed: u64, entry: usize) -> Self {
        let i = entry as u64;
        Self {
            subset: derive_seed(master_seed, "subset", i),
            pretrain: derive_seed(master_seed, "pretrain", i),
            finetune_data: derive_seed(master_seed, "finetune-data", i),
            finetune: derive_seed(master_seed, "finetune", i),
            head: derive_seed(master_seed, "head", i),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEntry {
    pub pretrained: Model,
    pub finetuned: Model,
    pub pretrain_member_ids: BTreeSet<u64>,
    pub seeds: EntrySeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub schema_version: u32,
    pub shadow_count: usize,
    pub member_set_size: usize,
    pub downstream_kind: TaskKind,
    pub downstream_spec: DistributionSpec,
    pub config: ShadowConfig,
    pub master_seed: u64,
    pub population_class_count: usize,
    pub entry_seeds: Vec<EntrySeeds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEnsemble {
    pub entries: Vec<ShadowEntry>,
    pub challenge: ChallengeSet,
    pub population: Dataset,
    pub downstream_kind: TaskKind,
    pub manifest: EnsembleManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    In,
    Out,
}

impl Membership {
    pub fn is_in(self) -> bool {
        self == Membership::In
    }

    pub fn from_bool(member: bool) -> Self {
        if member {
            Membership::In
        } else {
            Membership::Out
        }
    }
}

pub(crate) fn half_subset(population: &Dataset, seed: u64) -> (Dataset, BTreeSet<u64>) {
    let size = population.len() / 2;
    let mut picked = rand::seq::index::sample(&mut rng(seed), population.len(), size).into_vec();
    picked.sort_unstable();
    let subset = population.select(&picked);
    let ids = subset.ids().collect();
    (subset, ids)
}

fn finetune_entry(
    pretrained: &Model,
    downstream: &DistributionSpec,
    config: &ShadowConfig,
    seeds: &EntrySeeds,
    exclude: &HashSet<u64>,
) -> Result<Model> {
    let data = sample_excluding(downstream, config.finetune_size, seeds.finetune_data, exclude)?;
    let cfg = config.finetune.with_seed(seeds.finetune);
    match &config.dp {
        Some(dp) => {
            let dp = DPConfig {
                noise_seed: derive_seed(seeds.finetune, "dp-noise", dp.noise_seed),
                ..dp.clone()
            };
            dp_finetune(pretrained, &data, seeds.head, &dp, &cfg)
        }
        None => finetune(
            pretrained,
            &data,
            &FinetuneStrategy::new(config.strategy, seeds.head),
            &cfg,
        ),
    }
}

fn validate(population: &Dataset, challenge: &ChallengeSet, config: &ShadowConfig) -> Result<()> {
    if config.shadow_count < 2 {
        return Err(Error::Config(format!(
            "need at least 2 shadow models, got {}",
            config.shadow_count
        )));
    }
    if population.len() < 2 {
        return Err(Error::Size {
            requested: 2,
            available: population.len(),
        });
    }
    if config.finetune_size == 0 {
        return Err(Error::Config("finetune_size must be positive".into()));
    }
    let pool: HashSet<u64> = population.ids().collect();
    if let Some(p) = challenge.points.iter().find(|p| !pool.contains(&p.id)) {
        return Err(Error::UnknownId(p.id));
    }
    Ok(())
}

/// Trains `config.shadow_count` (pretrained, finetuned) pairs.
///
/// Entries are independent and seeded from `(master_seed, entry index)`,
/// so the result does not depend on `exec`.
pub fn train_shadow_models(
    population: &Dataset,
    challenge: &ChallengeSet,
    downstream: &DistributionSpec,
    config: &ShadowConfig,
    master_seed: u64,
    exec: Execution,
) -> Result<ShadowEnsemble> {
    validate(population, challenge, config)?;
    let n = config.shadow_count;
    let seeds: Vec<EntrySeeds> = (0..n).map(|i| EntrySeeds::derive(master_seed, i)).collect();
    let exclude: HashSet<u64> = population.ids().collect();

    let shared = if config.public_pretrained {
        let (subset, ids) = half_subset(population, seeds[0].subset);
        Some((pretrain(&config.hidden, &subset, &config.pretrain.with_seed(seeds[0].pretrain))?, ids))
    } else {
        None
    };

    let entries = try_map_range(exec, n, |i| -> Result<ShadowEntry> {
        let s = &seeds[i];
        let (pretrained, ids) = match &shared {
            Some((model, ids)) => (model.clone(), ids.clone()),
            None => {
                let (subset, ids) = half_subset(population, s.subset);
                (pretrain(&config.hidden, &subset, &config.pretrain.with_seed(s.pretrain))?, ids)
            }
        };
        let finetuned = finetune_entry(&pretrained, downstream, config, s, &exclude)?;
        log::debug!("shadow entry {i} trained");
        Ok(ShadowEntry {
            pretrained,
            finetuned,
            pretrain_member_ids: ids,
            seeds: *s,
        })
    })?;

    Ok(ShadowEnsemble {
        entries,
        challenge: challenge.clone(),
        population: population.clone(),
        downstream_kind: downstream.kind,
        manifest: EnsembleManifest {
            schema_version: ENSEMBLE_SCHEMA_VERSION,
            shadow_count: n,
            member_set_size: population.len() / 2,
            downstream_kind: downstream.kind,
            downstream_spec: downstream.clone(),
            config: config.clone(),
            master_seed,
            population_class_count: population.class_count(),
            entry_seeds: seeds,
        },
    })
}

/// Re-finetunes every entry's pretrained model under a new finetuning
/// configuration; pretraining and member sets are reused.
pub fn refinetune(
    ensemble: &ShadowEnsemble,
    downstream: &DistributionSpec,
    config: &ShadowConfig,
    exec: Execution,
) -> Result<ShadowEnsemble> {
    if config.shadow_count != ensemble.entries.len() {
        return Err(Error::Config(format!(
            "config has {} shadows but the ensemble has {}",
            config.shadow_count,
            ensemble.entries.len()
        )));
    }
    let exclude: HashSet<u64> = ensemble.population.ids().collect();
    let entries = try_map_range(exec, ensemble.entries.len(), |i| -> Result<ShadowEntry> {
        let old = &ensemble.entries[i];
        let finetuned = finetune_entry(&old.pretrained, downstream, config, &old.seeds, &exclude)?;
        Ok(ShadowEntry {
            finetuned,
            ..old.clone()
        })
    })?;
    let mut manifest = ensemble.manifest.clone();
    manifest.config = config.clone();
    manifest.downstream_kind = downstream.kind;
    manifest.downstream_spec = downstream.clone();
    Ok(ShadowEnsemble {
        entries,
        downstream_kind: downstream.kind,
        manifest,
        ..ensemble.clone()
    })
}

impl ShadowEnsemble {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries each challenge point is IN for, in challenge order.
    pub fn in_counts(&self) -> Vec<usize> {
        self.challenge
            .points
            .iter()
            .map(|p| {
                self.entries
                    .iter()
                    .filter(|e| e.pretrain_member_ids.contains(&p.id))
                    .count()
            })
            .collect()
    }
}

/// IN iff `id` is in the pretraining subset of entry `entry`.
pub fn membership_bit(ensemble: &ShadowEnsemble, entry: usize, id: u64) -> Result<Membership> {
    let e = ensemble.entries.get(entry).ok_or(Error::Size {
        requested: entry + 1,
        available: ensemble.entries.len(),
    })?;
    if !ensemble.population.ids().any(|p| p == id) {
        return Err(Error::UnknownId(id));
    }
    Ok(Membership::from_bool(e.pretrain_member_ids.contains(&id)))
}

/// The models of the target entry. Its member set is deliberately absent.
#[derive(Debug, Clone, Copy)]
pub struct TargetView<'a> {
    pub index: usize,
    pub finetuned: &'a Model,
    pub pretrained: &'a Model,
}

/// Everything the attacker may use in one rotation: every entry except the
/// target, addressed by local position `0..len()`.
#[derive(Debug, Clone)]
pub struct AttackerView<'a> {
    target: usize,
    entries: Vec<(usize, &'a ShadowEntry)>,
}

impl<'a> AttackerView<'a> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ensemble index of local position `j`.
    pub fn ensemble_index(&self, j: usize) -> usize {
        self.entries[j].0
    }

    pub fn finetuned(&self, j: usize) -> &'a Model {
        &self.entries[j].1.finetuned
    }

    pub fn pretrained(&self, j: usize) -> &'a Model {
        &self.entries[j].1.pretrained
    }

    pub fn membership(&self, j: usize, id: u64) -> Membership {
        Membership::from_bool(self.entries[j].1.pretrain_member_ids.contains(&id))
    }

    /// Ensemble indices excluded from this view.
    pub fn excluded_target(&self) -> usize {
        self.target
    }
}

/// Yields every entry once as the target, paired with a view of the others.
pub fn rotate_targets(
    ensemble: &ShadowEnsemble,
) -> impl Iterator<Item = (TargetView<'_>, AttackerView<'_>)> + '_ {
    (0..ensemble.entries.len()).map(move |t| {
        let entry = &ensemble.entries[t];
        let target = TargetView {
            index: t,
            finetuned: &entry.finetuned,
            pretrained: &entry.pretrained,
        };
        let view = AttackerView {
            target: t,
            entries: ensemble
                .entries
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != t)
                .collect(),
        };
        (target, view)
    })
}

/// Attacker view of a single rotation.
pub fn attacker_view(ensemble: &ShadowEnsemble, target: usize) -> Option<(TargetView<'_>, AttackerView<'_>)> {
    rotate_targets(ensemble).nth(target)
}

fn entry_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("entry_{i}"))
}

fn write_ids(path: &Path, ids: impl Iterator<Item = u64>) -> Result<()> {
    let mut out = String::from("id\n");
    for id in ids {
        out.push_str(&id.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_ids(path: &Path) -> Result<Vec<u64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("id") {
        return Err(Error::Parse(format!("{} lacks an id header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().map_err(|_| Error::Parse(format!("bad id {l:?}"))))
        .collect()
}

/// Layout: `manifest.json`, `population.csv`, `challenges.csv` and
/// `entry_<i>/{pretrained.json, finetuned.json, members.csv}`.
pub fn save_ensemble(ensemble: &ShadowEnsemble, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&ensemble.manifest)?;
    let path = dir.join("manifest.json");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    ensemble.population.write_csv(&dir.join("population.csv"))?;
    write_ids(&dir.join("challenges.csv"), ensemble.challenge.ids().into_iter())?;
    for (i, e) in ensemble.entries.iter().enumerate() {
        let d = entry_dir(dir, i);
        fs::create_dir_all(&d).map_err(|err| Error::io(&d, err))?;
        e.pretrained.save(&d.join("pretrained.json"))?;
        e.finetuned.save(&d.join("finetuned.json"))?;
        write_ids(&d.join("members.csv"), e.pretrain_member_ids.iter().copied())?;
    }
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<ShadowEnsemble> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EnsembleManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != ENSEMBLE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: ENSEMBLE_SCHEMA_VERSION,
        });
    }
    if manifest.entry_seeds.len() != manifest.shadow_count {
        return Err(Error::Parse("manifest seed count differs from shadow count".into()));
    }
    let population = Dataset::read_csv(
        &dir.join("population.csv"),
        Some(manifest.population_class_count),
    )?;
    let by_id: HashMap<u64, usize> = population.ids().enumerate().map(|(i, id)| (id, i)).collect();
    let challenge = ChallengeSet {
        points: read_ids(&dir.join("challenges.csv"))?
            .into_iter()
            .map(|id| {
                by_id
                    .get(&id)
                    .map(|&i| population.points()[i].clone())
                    .ok_or(Error::UnknownId(id))
            })
            .collect::<Result<_>>()?,
    };
    let entries = (0..manifest.shadow_count)
        .map(|i| {
            let d = entry_dir(dir, i);
            let load = || -> Result<ShadowEntry> {
                let members: BTreeSet<u64> = read_ids(&d.join("members.csv"))?.into_iter().collect();
                if members.len() != manifest.member_set_size {
                    return Err(Error::Parse(format!(
                        "{} members, manifest says {}",
                        members.len(),
                        manifest.member_set_size
                    )));
                }
                Ok(ShadowEntry {
                    pretrained: Model::load(&d.join("pretrained.json"))?,
                    finetuned: Model::load(&d.join("finetuned.json"))?,
                    pretrain_member_ids: members,
                    seeds: manifest.entry_seeds[i],
                })
            };
            load().map_err(|e| Error::EntryLoad {
                entry: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShadowEnsemble {
        entries,
        challenge,
        population,
        downstream_kind: manifest.downstream_kind,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{derive_task, designate_challenges, make_pretrain_spec, sample_population, SpecParams};
    use crate::nn::LrSchedule;

    pub(crate) fn tiny_config(n: usize) -> ShadowConfig {
        let train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.05,
            weight_decay: 1e-5,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        };
        ShadowConfig {
            shadow_count: n,
            hidden: vec![8],
            pretrain: train.clone(),
            finetune: train,
            strategy: StrategyKind::FeatureExtraction,
            dp: None,
            finetune_size: 40,
            public_pretrained: false,
        }
    }

    fn setup(pool: usize, challenges: usize) -> (Dataset, ChallengeSet, DistributionSpec) {
        let spec = make_pretrain_spec(&SpecParams {
            feature_dim: 4,
            fine_classes: 4,
            coarse_classes: 2,
            ..SpecParams::default()
        })
        .unwrap();
        let pop = sample_population(&spec, pool, 1).unwrap();
        let ch = designate_challenges(&pop, challenges, 2).unwrap();
        let ds = derive_task(&spec, TaskKind::Coarse, 3).unwrap();
        (pop, ch, ds)
    }

    #[test]
    fn member_sets_are_half_the_pool() {
        let (pop, ch, ds) = setup(101, 5);
        let e = train_shadow_models(&pop, &ch, &ds, &tiny_config(2), 0, Execution::Parallel).unwrap();
        assert_eq!(e.len(), 2);
        for entry in &e.entries {
            assert_eq!(entry.pretrain_member_ids.len(), 50);
            assert_eq!(entry.finetuned.class_count(), 2);
            assert_eq!(entry.pretrained.class_count(), 4);
        }
        assert_eq!(e.manifest.shadow_count, 2);
    }

    #[test]
    fn in_counts_within_binomial_bounds() {
        let (pop, ch, ds) = setup(200, 60);
        let mut cfg = tiny_config(32);
        cfg.pretrain.epochs = 0;
        cfg.finetune.epochs = 1;
        let e = train_shadow_models(&pop, &ch, &ds, &cfg, 4, Execution::Parallel).unwrap();
        for (count, p) in e.in_counts().into_iter().zip(&ch.points) {
            assert!((8..=24).contains(&count), "challenge {} IN for {count}", p.id);
            let bits = (0..32)
                .filter(|&i| membership_bit(&e, i, p.id).unwrap().is_in())
                .count();
            assert_eq!(bits, count);
        }
    }

    #[test]
    fn ensemble_is_deterministic_across_execution_modes() {
        let (pop, ch, ds) = setup(60, 5);
        let a = train_shadow_models(&pop, &ch, &ds, &tiny_config(3), 9, Execution::Parallel).unwrap();
        let b = train_shadow_models(&pop, &ch, &ds, &tiny_config(3), 9, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn membership_bits() {
        let (pop, ch, ds) = setup(60, 5);
        let mut e = train_shadow_models(&pop, &ch, &ds, &tiny_config(2), 0, Execution::Sequential).unwrap();
        let id = ch.points[0].id;
        e.entries[0].pretrain_member_ids.insert(id);
        e.entries[1].pretrain_member_ids.remove(&id);
        assert_eq!(membership_bit(&e, 0, id).unwrap(), Membership::In);
        assert_eq!(membership_bit(&e, 1, id).unwrap(), Membership::Out);
        assert!(matches!(membership_bit(&e, 0, 12345), Err(Error::UnknownId(12345))));
        assert!(membership_bit(&e, 5, id).is_err());
    }

    #[test]
    fn rotation_covers_every_entry_once() {
        let (pop, ch, ds) = setup(60, 5);
        let e = train_shadow_models(&pop, &ch, &ds, &tiny_config(3), 0, Execution::Sequential).unwrap();
        let rotations: Vec<_> = rotate_targets(&e).collect();
        assert_eq!(rotations.len(), 3);
        let mut targets = Vec::new();
        for (target, view) in &rotations {
            assert_eq!(view.len(), 2);
            assert_eq!(view.excluded_target(), target.index);
            for j in 0..view.len() {
                assert_ne!(view.ensemble_index(j), target.index);
            }
            targets.push(target.index);
        }
        assert_eq!(targets, vec![0, 1, 2]);
    }

    #[test]
    fn too_few_shadows_rejected() {
        let (pop, ch, ds) = setup(60, 5);
        assert!(train_shadow_models(&pop, &ch, &ds, &tiny_config(1), 0, Execution::Sequential).is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let (pop, ch, ds) = setup(60, 5);
        let e = train_shadow_models(&pop, &ch, &ds, &tiny_config(2), 0, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(&e, dir.path()).unwrap();
        assert_eq!(load_ensemble(dir.path()).unwrap(), e);

        let ck = dir.path().join("entry_1/finetuned.json");
        let text = fs::read_to_string(&ck).unwrap();
        fs::write(&ck, text.replace("\"schema_version\":1", "\"schema_version\":7")).unwrap();
        match load_ensemble(dir.path()) {
            Err(Error::EntryLoad { entry: 1, source }) => {
                assert!(matches!(*source, Error::SchemaVersion { found: 7, .. }))
            }
            other => panic!("expected entry load error, got {other:?}"),
        }

        fs::remove_dir_all(dir.path().join("entry_1")).unwrap();
        let err = load_ensemble(dir.path()).unwrap_err();
        assert!(matches!(err, Error::EntryLoad { entry: 1, .. }));
        assert!(err.to_string().contains("entry 1"));
    }

    #[test]
    fn public_pretrained_shares_one_base() {
        let (pop, ch, ds) = setup(60, 5);
        let mut cfg = tiny_config(3);
        cfg.public_pretrained = true;
        let e = train_shadow_models(&pop, &ch, &ds, &cfg, 0, Execution::Sequential).unwrap();
        assert!(e.entries.iter().all(|x| x.pretrained == e.entries[0].pretrained));
        assert!(e
            .entries
            .iter()
            .all(|x| x.pretrain_member_ids == e.entries[0].pretrain_member_ids));
    }

    #[test]
    fn refinetune_keeps_pretraining() {
        let (pop, ch, ds) = setup(60, 5);
        let e = train_shadow_models(&pop, &ch, &ds, &tiny_config(2), 0, Execution::Sequential).unwrap();
        let mut cfg = tiny_config(2);
        cfg.finetune.epochs = 3;
        let r = refinetune(&e, &ds, &cfg, Execution::Sequential).unwrap();
        for (a, b) in e.entries.iter().zip(&r.entries) {
            assert_eq!(a.pretrained, b.pretrained);
            assert_eq!(a.pretrain_member_ids, b.pretrain_member_ids);
            assert_ne!(a.finetuned, b.finetuned);
        }
    }
}
