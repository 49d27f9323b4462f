use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const MINIMAL: &str = r#"{
  "shadows": 6,
  "data": {"pool_size": 200, "challenges": 10, "test_size": 50},
  "downstream": {"finetune_size": 60},
  "hidden": [8],
  "pretrain": {"epochs": 5, "batch_size": 16, "learning_rate": 0.1},
  "finetune": {"epochs": 3, "batch_size": 16, "learning_rate": 0.1},
  "attacks": ["tmi", "lira_adapted", "lira_direct", "tmi_global"],
  "augmentations": 2,
  "meta_arch": {"kind": "logistic", "epochs": 20},
  "master_seed": 5
}"#;

fn tmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmi"))
        .args(args)
        .env_remove("TMI_OUT_DIR")
        .env("TMI_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn setup() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("minimal.json");
    fs::write(&cfg, MINIMAL).unwrap();
    (tmp, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.clone(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn run_writes_report_and_curves() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("out");
    let result = tmi(&["run", "--config", s(&cfg), "--out", s(&out)]);
    ok(&result);
    let report = json(&out.join("report.json"));
    assert_eq!(report["complete"], Value::Bool(true));
    for name in ["tmi", "lira_adapted", "lira_direct", "tmi_global"] {
        assert!(out.join(format!("roc_{name}.csv")).exists(), "roc_{name}.csv");
        assert!(report["summaries"][name]["auc"].is_f64());
    }
    assert!(out.join("config.json").exists());
    let hash = report["manifest_hash"].as_str().unwrap();
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(scores.starts_with(&format!("# manifest: {hash}")));
    assert_eq!(fs::read_to_string(out.join("manifest.sha256")).unwrap().trim(), hash);
    let printed: Value = serde_json::from_slice(&result.stdout).unwrap();
    assert_eq!(printed, report["summaries"]);
}

#[test]
fn attack_without_ensemble_reports_missing_artifact() {
    let (tmp, cfg) = setup();
    let missing = tmp.path().join("no-ensemble");
    let out = tmi(&["attack", "--config", s(&cfg), "--ensemble", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).expect("error JSON on stderr");
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("manifest.json"));
}

#[test]
fn bad_flags_exit_with_usage_status() {
    assert_eq!(tmi(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(tmi(&["explode"]).status.code(), Some(2));
    assert_eq!(tmi(&["attack"]).status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_json_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"shadows": 4, "colour": "blue"}"#).unwrap();
    let out = tmi(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "experiment_config");
}

#[test]
fn staged_pipeline_matches_run_and_leaves_ensemble_untouched() {
    let (tmp, cfg) = setup();
    let data = tmp.path().join("data");
    let ens = tmp.path().join("ensemble");
    let att = tmp.path().join("attack");
    let ev = tmp.path().join("eval");
    let full = tmp.path().join("full");

    ok(&tmi(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    for f in ["population.csv", "challenges.csv", "pretrain_spec.json", "downstream_spec.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    ok(&tmi(&["train-shadows", "--config", s(&cfg), "--data", s(&data), "--out", s(&ens)]));
    let before = snapshot(&ens);
    ok(&tmi(&["attack", "--config", s(&cfg), "--ensemble", s(&ens), "--out", s(&att)]));
    ok(&tmi(&["eval", "--config", s(&cfg), "--scores", s(&att.join("scores.csv")), "--out", s(&ev)]));
    assert_eq!(snapshot(&ens), before, "ensemble artifacts changed");

    // Eval recomputes exactly the summaries stored in the report.
    let report = json(&att.join("report.json"));
    assert_eq!(json(&ev.join("summaries.json")), report["summaries"]);

    // The staged path and the end-to-end path agree.
    ok(&tmi(&["run", "--config", s(&cfg), "--out", s(&full)]));
    assert_eq!(
        fs::read(att.join("report.json")).unwrap(),
        fs::read(full.join("report.json")).unwrap()
    );
}

#[test]
fn emitted_config_replays_byte_identically() {
    let (tmp, cfg) = setup();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    ok(&tmi(&["run", "--config", s(&cfg), "--seed", "11", "--out", s(&first)]));
    let echoed = first.join("config.json");
    ok(&tmi(&["run", "--config", s(&echoed), "--out", s(&second)]));
    for f in ["report.json", "scores.csv", "roc_tmi.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let a = json(&first.join("config.json"));
    let b = json(&second.join("config.json"));
    assert_eq!(a["master_seed"], 11);
    assert_eq!(a["output_dir"], Value::String(s(&first).into()));
    assert_eq!(b["master_seed"], 11);
}

#[test]
fn out_dir_from_environment() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("env-out");
    let result = Command::new(env!("CARGO_BIN_EXE_tmi"))
        .args(["gen-data", "--config", s(&cfg)])
        .env("TMI_OUT_DIR", &out)
        .output()
        .unwrap();
    ok(&result);
    assert!(out.join("population.csv").exists());
}

#[test]
fn ablate_writes_one_report_per_arm() {
    let (tmp, _) = setup();
    let mut cfg: Value = serde_json::from_str(MINIMAL).unwrap();
    cfg["ablation"] = serde_json::json!({"topk": [1, 5]});
    let path = tmp.path().join("ablate.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = tmp.path().join("ablate");
    ok(&tmi(&["ablate", "--config", s(&path), "--out", s(&out)]));
    let index = json(&out.join("ablation.json"));
    for tag in ["topk_1", "topk_5"] {
        assert!(out.join(tag).join("report.json").exists(), "{tag}");
        assert!(index[tag]["tmi"]["auc"].is_f64());
    }
}
