use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auc, roc, tpr_at_fpr, RocCurve, Summary};

/// One score of one attack on one (challenge, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub challenge_id: u64,
    pub target_index: usize,
    pub attack_name: String,
    pub score: f64,
    pub true_membership_bit: u8,
}

impl ScoreRow {
    pub fn member(&self) -> bool {
        self.true_membership_bit == 1
    }
}

/// A (challenge, target) pair that was not attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub challenge_id: u64,
    pub target_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FprTpr {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    #[serde(flatten)]
    pub pooled: Summary,
    pub tpr_at_fpr: Vec<FprTpr>,
    /// AUC of each target's rows; `None` when a target saw one class only.
    pub per_target_auc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRules {
    pub balanced_accuracy: String,
    pub tpr_at_fpr: String,
    pub pooling: String,
    pub lira_score: String,
}

impl Default for MetricRules {
    fn default() -> Self {
        Self {
            balanced_accuracy: "best threshold over the sweep".into(),
            tpr_at_fpr: "max tpr with fpr <= target, no interpolation".into(),
            pooling: "all (challenge, target) pairs pooled; per-target auc listed separately".into(),
            lira_score: "log likelihood ratio".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub manifest_hash: String,
    pub tag: Option<String>,
    pub complete: bool,
    /// Stored in `scores.csv` rather than the JSON report.
    #[serde(skip)]
    pub rows: Vec<ScoreRow>,
    pub row_count: usize,
    /// `challenges x targets x attacks`; equals rows plus skipped pairs
    /// times the attack count.
    pub expected_rows: usize,
    pub skipped: Vec<SkippedPair>,
    pub summaries: BTreeMap<String, AttackSummary>,
    /// Mean held-out accuracy of the finetuned models.
    pub downstream_accuracy: f64,
    pub views_per_query: usize,
    /// Row count of a per-point metaclassifier dataset, when one was built.
    pub meta_rows_per_point: Option<usize>,
    pub metric_rules: MetricRules,
}

impl AttackReport {
    pub fn rows_for<'a>(&'a self, attack: &'a str) -> impl Iterator<Item = &'a ScoreRow> + 'a {
        self.rows.iter().filter(move |r| r.attack_name == attack)
    }

    pub fn auc(&self, attack: &str) -> Option<f64> {
        self.summaries.get(attack).map(|s| s.pooled.auc)
    }

    pub fn curve(&self, attack: &str) -> Result<RocCurve> {
        let (scores, labels): (Vec<f64>, Vec<bool>) =
            self.rows_for(attack).map(|r| (r.score, r.member())).unzip();
        roc(&scores, &labels)
    }
}

/// Pooled and per-target summaries for every attack present in `rows`.
pub fn summarize_rows(rows: &[ScoreRow], fpr_targets: &[f64]) -> Result<BTreeMap<String, AttackSummary>> {
    let mut by_attack: BTreeMap<&str, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        by_attack.entry(&r.attack_name).or_default().push(r);
    }
    let targets = rows.iter().map(|r| r.target_index + 1).max().unwrap_or(0);
    let mut out = BTreeMap::new();
    for (name, rs) in by_attack {
        let (scores, labels): (Vec<f64>, Vec<bool>) = rs.iter().map(|r| (r.score, r.member())).unzip();
        let curve = roc(&scores, &labels)?;
        let per_target_auc = (0..targets)
            .map(|t| {
                let (s, l): (Vec<f64>, Vec<bool>) = rs
                    .iter()
                    .filter(|r| r.target_index == t)
                    .map(|r| (r.score, r.member()))
                    .unzip();
                roc(&s, &l).ok().map(|c| auc(&c))
            })
            .collect();
        out.insert(
            name.to_string(),
            AttackSummary {
                pooled: Summary::from_curve(&curve),
                tpr_at_fpr: fpr_targets
                    .iter()
                    .map(|&fpr| FprTpr {
                        fpr,
                        tpr: tpr_at_fpr(&curve, fpr),
                    })
                    .collect(),
                per_target_auc,
            },
        );
    }
    Ok(out)
}

pub fn write_scores_csv(rows: &[ScoreRow], path: &Path, manifest_hash: &str) -> Result<()> {
    let mut out = format!("# manifest: {manifest_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a scores CSV, returning the rows and the manifest hash from the
/// header comment if present.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<ScoreRow>, Option<String>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# manifest: "))
        .map(str::to_string);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
    Ok((rows, hash))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `scores.csv` and one `roc_<attack>.csv` per attack.
pub fn write_report(report: &AttackReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(report, &dir.join("report.json"))?;
    write_scores_csv(&report.rows, &dir.join("scores.csv"), &report.manifest_hash)?;
    let comment = format!("manifest: {}", report.manifest_hash);
    for name in report.summaries.keys() {
        report
            .curve(name)?
            .write_csv(&dir.join(format!("roc_{name}.csv")), Some(&comment))?;
    }
    Ok(())
}

/// `manifest.sha256` next to outputs that have no header comment.
pub fn write_manifest_sidecar(manifest_hash: &str, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.sha256");
    fs::write(&path, format!("{manifest_hash}\n")).map_err(|e| Error::io(&path, e))
}

pub fn write_summaries(summaries: &BTreeMap<String, AttackSummary>, path: &Path) -> Result<()> {
    write_json(summaries, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(c: u64, t: usize, a: &str, s: f64, m: u8) -> ScoreRow {
        ScoreRow {
            challenge_id: c,
            target_index: t,
            attack_name: a.into(),
            score: s,
            true_membership_bit: m,
        }
    }

    #[test]
    fn csv_round_trip_keeps_exact_floats() {
        let rows = vec![
            row(1, 0, "tmi", 0.1 + 0.2, 1),
            row(u64::MAX, 3, "lira_adapted", -1234.5678e-9, 0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_scores_csv(&rows, &path, "abc").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# manifest: abc\nchallenge_id,target_index,attack_name,score,true_membership_bit\n"));
        let (back, hash) = read_scores_csv(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(hash.as_deref(), Some("abc"));
    }

    #[test]
    fn per_target_and_pooled_summaries() {
        let rows = vec![
            row(1, 0, "tmi", 0.9, 1),
            row(2, 0, "tmi", 0.1, 0),
            row(1, 1, "tmi", 0.2, 1),
            row(2, 1, "tmi", 0.3, 1),
        ];
        let s = summarize_rows(&rows, &[0.01]).unwrap();
        let tmi = &s["tmi"];
        assert_eq!(tmi.per_target_auc, vec![Some(1.0), None]);
        assert_eq!((tmi.pooled.n_pos, tmi.pooled.n_neg), (3, 1));
        assert_eq!(tmi.pooled.auc, 1.0);
        assert_eq!(tmi.tpr_at_fpr, vec![FprTpr { fpr: 0.01, tpr: 1.0 }]);
    }
}
