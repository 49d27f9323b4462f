//! End-to-end experiments: data generation, shadow training, attacks and
//! metrics, with result files written to an output directory.

mod config;
mod report;
mod run;

pub use config::{Ablation, AttackKind, Control, DataConfig, DownstreamConfig, ExperimentConfig};
pub use report::{
    read_scores_csv, summarize_rows, write_manifest_sidecar, write_report, write_scores_csv, write_summaries, AttackReport, AttackSummary,
    FprTpr, MetricRules, ScoreRow, SkippedPair,
};
pub use run::{
    ablate_ensemble, ablation_arms, attack_ensemble, downstream_accuracy, load_data, prepare_data, run_ablation,
    run_experiment, run_experiment_with, run_on_ensemble, save_data, train_ensemble, write_run_outputs,
    AttackSettings, ExperimentData,
};
