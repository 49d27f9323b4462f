use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tmi_core::error::{Error, Result};
use tmi_core::harness::{
    self, ablate_ensemble, ablation_arms, load_data, prepare_data, read_scores_csv, run_on_ensemble, save_data,
    summarize_rows, train_ensemble, write_manifest_sidecar, write_run_outputs, write_summaries, AttackSummary,
    ExperimentConfig,
};
use tmi_core::par::{set_worker_count, Execution};
use tmi_core::shadow::{load_ensemble, save_ensemble};

/// Membership inference against the pretraining data of finetuned models.
#[derive(Parser)]
#[command(name = "tmi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the population, challenge points and task specs.
    GenData(Common),
    /// Train the shadow ensemble.
    TrainShadows {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data. Regenerated from the config if
        /// omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the configured attacks against a saved ensemble.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Directory written by train-shadows.
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Recompute summaries from a scores CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Run every arm of the configured ablation over one ensemble.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reuse a saved ensemble instead of training one.
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Data, shadows, attacks and metrics end to end.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Overrides TMI_OUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        }
        .with_env_overrides();
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.output_dir
        .as_deref()
        .ok_or_else(|| Error::ExperimentConfig("no output directory (use --out or TMI_OUT_DIR)".into()))
}

fn print_summaries(summaries: &BTreeMap<String, AttackSummary>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(summaries)?);
    Ok(())
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()? + "\n").map_err(|e| Error::Io { path, source: e })?;
    write_manifest_sidecar(&cfg.manifest_hash()?, dir)
}

fn execute(command: Command) -> Result<()> {
    let exec = Execution::Parallel;
    match command {
        Command::GenData(common) => {
            let cfg = common.resolve()?;
            let dir = out_dir(&cfg)?;
            save_data(&prepare_data(&cfg)?, dir)?;
            write_config(&cfg, dir)
        }
        Command::TrainShadows { common, data } => {
            let cfg = common.resolve()?;
            let dir = out_dir(&cfg)?;
            let data = match data {
                Some(d) => load_data(&d)?,
                None => prepare_data(&cfg)?,
            };
            save_ensemble(&train_ensemble(&cfg, &data, exec)?, dir)?;
            write_config(&cfg, dir)
        }
        Command::Attack { common, ensemble } => {
            let cfg = common.resolve()?;
            let ensemble = load_ensemble(&ensemble)?;
            let report = run_on_ensemble(&cfg, &ensemble, exec)?;
            if let Some(dir) = &cfg.output_dir {
                write_run_outputs(&cfg, &report, dir)?;
            }
            print_summaries(&report.summaries)
        }
        Command::Eval { common, scores } => {
            let cfg = common.resolve()?;
            let (rows, hash) = read_scores_csv(&scores)?;
            let summaries = summarize_rows(&rows, &cfg.fpr_targets)?;
            if let Some(dir) = &cfg.output_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                write_summaries(&summaries, &dir.join("summaries.json"))?;
                if let Some(hash) = hash {
                    write_manifest_sidecar(&hash, dir)?;
                }
            }
            print_summaries(&summaries)
        }
        Command::Ablate { common, ensemble } => {
            let cfg = common.resolve()?;
            let ablation = cfg
                .ablation
                .clone()
                .ok_or_else(|| Error::ExperimentConfig("config has no ablation".into()))?;
            let reports = match ensemble {
                Some(path) => {
                    let arms = ablation_arms(&cfg, &ablation)?;
                    ablate_ensemble(&cfg, &load_ensemble(&path)?, &arms, exec)?
                }
                None => harness::run_ablation(&cfg, &ablation, exec)?,
            };
            let index: BTreeMap<String, _> = reports
                .iter()
                .map(|r| (r.tag.clone().unwrap_or_default(), &r.summaries))
                .collect();
            println!("{}", serde_json::to_string_pretty(&index)?);
            Ok(())
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let report = harness::run_experiment_with(&cfg, exec)?;
            print_summaries(&report.summaries)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(workers) = std::env::var("TMI_WORKERS").ok().and_then(|w| w.parse().ok()) {
        if workers > 0 && !set_worker_count(workers) {
            log::warn!("worker pool already initialized; TMI_WORKERS ignored");
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{doc}");
            ExitCode::from(1)
        }
    }
}
