use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{KRule, MetaArch, ViewConfig};
use crate::datasets::{SpecParams, TaskKind};
use crate::error::{Error, Result};
use crate::nn::{LrSchedule, TrainConfig};
use crate::rng::derive_seed;
use crate::shadow::ShadowConfig;
use crate::training::{DPConfig, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Tmi,
    LiraAdapted,
    LiraDirect,
    TmiGlobal,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Tmi,
        AttackKind::LiraAdapted,
        AttackKind::LiraDirect,
        AttackKind::TmiGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Tmi => "tmi",
            AttackKind::LiraAdapted => "lira_adapted",
            AttackKind::LiraDirect => "lira_direct",
            AttackKind::TmiGlobal => "tmi_global",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

/// Sanity control runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    #[default]
    None,
    /// The target's ground-truth bits come from a decoy half of the pool
    /// that it was never trained on, so no attack can beat chance.
    ShuffledMembership,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub feature_dim: usize,
    pub fine_classes: usize,
    pub coarse_classes: usize,
    pub separation: f64,
    pub fine_spread: f64,
    pub cov_scale: f64,
    pub pool_size: usize,
    pub challenges: usize,
    /// Held-out downstream points used to report finetuned accuracy.
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = SpecParams::default();
        Self {
            feature_dim: p.feature_dim,
            fine_classes: p.fine_classes,
            coarse_classes: p.coarse_classes,
            separation: p.separation,
            fine_spread: p.fine_spread,
            cov_scale: p.cov_scale,
            pool_size: 4000,
            challenges: 200,
            test_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub kind: TaskKind,
    /// Class count for disjoint and dissimilar tasks.
    pub classes: Option<usize>,
    pub finetune_size: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Coarse,
            classes: None,
            finetune_size: 500,
        }
    }
}

/// Arms of an ablation study; only the attack stage varies between arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Ablation {
    Topk(Vec<usize>),
    MetaArch(Vec<MetaArch>),
    Augmentations(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Ensemble size; every entry is the target once and the others act as
    /// the attacker's shadow models.
    pub shadows: usize,
    pub downstream: DownstreamConfig,
    pub strategy: StrategyKind,
    pub dp: Option<DPConfig>,
    pub hidden: Vec<usize>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub public_pretrained: bool,
    pub attacks: Vec<AttackKind>,
    pub augmentations: usize,
    pub augment_strength: f64,
    pub meta_arch: MetaArch,
    pub global_arch: MetaArch,
    pub topk: Option<usize>,
    pub lambda_reg: f64,
    pub fpr_targets: Vec<f64>,
    pub control: Control,
    pub ablation: Option<Ablation>,
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            shadows: 33,
            downstream: DownstreamConfig::default(),
            strategy: StrategyKind::FeatureExtraction,
            dp: None,
            // Wide then narrow: the pretrained model overfits its half of the
            // pool, and the 8-unit feature layer a frozen finetune reads from
            // has to carry what it memorized.
            hidden: vec![256, 8],
            pretrain: TrainConfig {
                epochs: 300,
                batch_size: 32,
                learning_rate: 0.1,
                weight_decay: 0.0,
                lr_schedule: LrSchedule::Cosine,
                seed: 0,
            },
            finetune: TrainConfig {
                epochs: 20,
                batch_size: 32,
                learning_rate: 0.05,
                weight_decay: 0.0,
                lr_schedule: LrSchedule::Cosine,
                seed: 0,
            },
            public_pretrained: false,
            attacks: vec![AttackKind::Tmi, AttackKind::LiraAdapted, AttackKind::LiraDirect],
            augmentations: 8,
            augment_strength: 0.1,
            meta_arch: MetaArch::default(),
            global_arch: MetaArch::knn(KRule::NShadow),
            topk: None,
            lambda_reg: 1e-6,
            fpr_targets: vec![0.001, 0.01],
            control: Control::None,
            ablation: None,
            master_seed: 0,
            output_dir: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ExperimentConfig(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `TMI_OUT_DIR` if set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os("TMI_OUT_DIR") {
            self.output_dir = Some(PathBuf::from(dir));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.feature_dim == 0 || d.fine_classes < 2 || d.coarse_classes == 0 {
            return Err(invalid("data dimensions and class counts must be positive"));
        }
        if d.test_size == 0 {
            return Err(invalid("test_size must be positive"));
        }
        if d.challenges == 0 || d.challenges > d.pool_size {
            return Err(invalid(format!(
                "challenges ({}) must be in [1, pool_size = {}]",
                d.challenges, d.pool_size
            )));
        }
        if self.shadows < 2 {
            return Err(invalid("need at least 2 shadows"));
        }
        if self.attacks.is_empty() {
            return Err(invalid("no attacks configured"));
        }
        let mut seen = self.attacks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.attacks.len() {
            return Err(invalid("duplicate attack in list"));
        }
        if self.augmentations == 0 {
            return Err(invalid("augmentations must be at least 1"));
        }
        if !(self.augment_strength >= 0.0 && self.augment_strength.is_finite()) {
            return Err(invalid("augment_strength must be finite and nonnegative"));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(invalid("lambda_reg must be nonnegative"));
        }
        if self.topk == Some(0) {
            return Err(invalid("topk must be at least 1"));
        }
        if self.fpr_targets.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(invalid("fpr targets must lie in [0, 1]"));
        }
        self.meta_arch.validate()?;
        self.global_arch.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if let Some(dp) = &self.dp {
            dp.validate(self.downstream.finetune_size)?;
        }
        Ok(())
    }

    pub fn spec_params(&self) -> SpecParams {
        let d = &self.data;
        SpecParams {
            feature_dim: d.feature_dim,
            fine_classes: d.fine_classes,
            coarse_classes: d.coarse_classes,
            separation: d.separation,
            fine_spread: d.fine_spread,
            cov_scale: d.cov_scale,
            seed: self.seed("spec"),
        }
    }

    pub fn shadow_config(&self) -> ShadowConfig {
        ShadowConfig {
            shadow_count: self.shadows,
            hidden: self.hidden.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            strategy: self.strategy,
            dp: self.dp.clone(),
            finetune_size: self.downstream.finetune_size,
            public_pretrained: self.public_pretrained,
        }
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            count: self.augmentations,
            strength: self.augment_strength,
            seed: self.seed("views"),
        }
    }

    /// Stage seed derived from the master seed.
    pub fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.master_seed, stage, 0)
    }

    /// SHA-256 of the resolved config, hex encoded. The output directory
    /// is left out: where results go does not change them.
    pub fn manifest_hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(&Self {
            output_dir: None,
            ..self.clone()
        })?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}
