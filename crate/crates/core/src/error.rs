use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the audit pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {actual}")]
    InputShape { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NumericInput(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty dataset: {0}")]
    EmptyData(&'static str),

    #[error("invalid training configuration: {0}")]
    Config(String),

    #[error("learning-rate schedule: epoch {epoch} outside [0, {total})")]
    Schedule { epoch: usize, total: usize },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("class count must be positive")]
    ClassCount,

    #[error("invalid distribution spec: {0}")]
    Spec(String),

    #[error("requested {requested} items from a pool of {available}")]
    Size { requested: usize, available: usize },

    #[error("invalid finetuning strategy: {0}")]
    Strategy(String),

    #[error("unknown id {0}")]
    UnknownId(u64),

    #[error("challenge {challenge_id}: degenerate IN/OUT split ({n_in} IN, {n_out} OUT)")]
    DegenerateSplit {
        challenge_id: u64,
        n_in: usize,
        n_out: usize,
    },

    #[error("gaussian fit needs at least 2 samples, got {0}")]
    Fit(usize),

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("metaclassifier training: {0}")]
    MetaTraining(String),

    #[error("top-k mask: k={k} outside [1, {classes}]")]
    Mask { k: usize, classes: usize },

    #[error("metric: {0}")]
    Metric(String),

    #[error("checkpoint schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("loading ensemble entry {entry}: {source}")]
    EntryLoad {
        entry: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{stage} stage failed (seed {seed}): {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid experiment config: {0}")]
    ExperimentConfig(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InputShape { .. } => "input_shape",
            Error::NumericInput(_) => "numeric_input",
            Error::Label { .. } => "label",
            Error::EmptyData(_) => "empty_data",
            Error::Config(_) => "config",
            Error::Schedule { .. } => "schedule",
            Error::Model(_) => "model",
            Error::ClassCount => "class_count",
            Error::Spec(_) => "spec",
            Error::Size { .. } => "size",
            Error::Strategy(_) => "strategy",
            Error::UnknownId(_) => "unknown_id",
            Error::DegenerateSplit { .. } => "degenerate_split",
            Error::Fit(_) => "fit",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::MetaTraining(_) => "meta_training",
            Error::Mask { .. } => "mask",
            Error::Metric(_) => "metric",
            Error::SchemaVersion { .. } => "schema_version",
            Error::EntryLoad { .. } => "entry_load",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Stage { .. } => "stage",
            Error::ExperimentConfig(_) => "experiment_config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Parse(_) => "parse",
        }
    }
}
