//! Accuracy, aggregate statistics, and results tables.

mod scenario;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::distill::student::student_predict;
use crate::error::{Error, Result};
use crate::model::{ClassSet, DualEncoderModel};
use crate::prompt::PromptParameters;

pub use scenario::{
    evaluate_seed, run_scenario, run_seed, train_seed, AccessLog, MethodSetup, ScenarioKind, ScenarioSpec,
    SeedOutcome, TrainedSeed,
};

/// Half-up rounding to two decimals, for reporting only.
pub fn round2(x: f64) -> f64 {
    // the nudge keeps decimal ties such as 42.9050 from landing below .5 in binary
    let s = x * 100.0;
    (s + 1e-9 * s.abs().max(1.0) + 0.5).floor() / 100.0
}

pub fn format_pct(x: f64) -> String {
    format!("{:.2}", round2(x))
}

/// Top-1 predictions for `samples` over `class_set`.
pub fn predict_labels(
    student: &DualEncoderModel,
    prompt: Option<&PromptParameters>,
    samples: &[Sample],
    class_set: &ClassSet,
    tau: f64,
) -> Result<Vec<usize>> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    Ok(student_predict(student, prompt, &images, class_set, tau)?
        .iter()
        .map(|p| p.argmax())
        .collect())
}

/// Top-1 accuracy in percent, full precision.
pub fn evaluate_accuracy(
    student: &DualEncoderModel,
    prompt: Option<&PromptParameters>,
    samples: &[Sample],
    class_set: &ClassSet,
    tau: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= class_set.len()) {
        return Err(Error::Contract(format!(
            "sample {} has label {} outside {} classes",
            s.id,
            s.label,
            class_set.len()
        )));
    }
    let pred = predict_labels(student, prompt, samples, class_set, tau)?;
    let correct = pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0 && new > 0.0) {
        return Err(Error::Contract(format!(
            "harmonic mean needs positive accuracies, got {base} and {new}"
        )));
    }
    Ok(2.0 * base * new / (base + new))
}

pub fn average_over_targets(per_dataset: &[f64]) -> Result<f64> {
    if per_dataset.is_empty() {
        return Err(Error::Contract("no targets to average".into()));
    }
    Ok(per_dataset.iter().sum::<f64>() / per_dataset.len() as f64)
}

/// Which part of a dataset's test split a row scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSplit {
    /// Every test class.
    Test,
    Base,
    New,
}

impl ReportSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportSplit::Test => "test",
            ReportSplit::Base => "base",
            ReportSplit::New => "new",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: ScenarioKind,
    pub method: String,
    pub backbone: String,
    pub dataset: String,
    pub seed: u64,
    pub split: ReportSplit,
    /// Percent; `None` marks a target that could not be evaluated.
    pub accuracy: Option<f64>,
}

const MISSING: &str = "NA";

#[derive(Serialize, Deserialize)]
struct CsvRow {
    scenario: ScenarioKind,
    method: String,
    backbone: String,
    dataset: String,
    seed: u64,
    split: ReportSplit,
    accuracy: String,
}

/// Per-seed rows; aggregates are computed from them on demand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.dataset) {
                out.push(r.dataset.clone());
            }
        }
        out
    }

    pub fn is_gap(&self, method: &str, dataset: &str) -> bool {
        self.rows
            .iter()
            .any(|r| r.method == method && r.dataset == dataset && r.accuracy.is_none())
    }

    /// Mean over seeds; `None` if no seed produced a number.
    pub fn seed_mean(&self, method: &str, dataset: &str, split: ReportSplit) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.dataset == dataset && r.split == split)
            .filter_map(|r| r.accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Average of per-target seed means, skipping gaps.
    pub fn target_average(&self, method: &str, targets: &[String]) -> Option<f64> {
        let v: Vec<f64> = targets
            .iter()
            .filter_map(|t| self.seed_mean(method, t, ReportSplit::Test))
            .collect();
        average_over_targets(&v).ok()
    }

    pub fn harmonic(&self, method: &str, dataset: &str) -> Option<f64> {
        let b = self.seed_mean(method, dataset, ReportSplit::Base)?;
        let n = self.seed_mean(method, dataset, ReportSplit::New)?;
        harmonic_mean(b, n).ok()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                scenario: r.scenario,
                method: r.method.clone(),
                backbone: r.backbone.clone(),
                dataset: r.dataset.clone(),
                seed: r.seed,
                split: r.split,
                accuracy: r.accuracy.map_or_else(|| MISSING.to_string(), |a| a.to_string()),
            })
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in rd.deserialize::<CsvRow>().enumerate() {
            let line = i + 2;
            let r = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            let accuracy = if r.accuracy == MISSING {
                None
            } else {
                let a: f64 = r.accuracy.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("accuracy {:?} is not a number", r.accuracy),
                })?;
                if !(0.0..=100.0).contains(&a) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("accuracy {a} outside [0, 100]"),
                    });
                }
                Some(a)
            };
            rows.push(MetricsRow {
                scenario: r.scenario,
                method: r.method,
                backbone: r.backbone,
                dataset: r.dataset,
                seed: r.seed,
                split: r.split,
                accuracy,
            });
        }
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_csv(&text)
    }

    /// Markdown tables: Source / targets / Average per scenario, and Base / New / H for base-to-novel.
    pub fn summary_markdown(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), format_pct);
        let mut by_kind: BTreeMap<ScenarioKind, MetricsTable> = BTreeMap::new();
        for r in &self.rows {
            by_kind.entry(r.scenario).or_default().rows.push(r.clone());
        }
        let mut out = String::new();
        for (kind, t) in by_kind {
            let _ = writeln!(out, "## {}\n", kind.as_str());
            let datasets = t.datasets();
            if kind == ScenarioKind::BaseToNovel {
                let _ = writeln!(out, "| Method | Dataset | Base | New | H |\n|---|---|---|---|---|");
                for m in t.methods() {
                    for d in &datasets {
                        let _ = writeln!(
                            out,
                            "| {m} | {d} | {} | {} | {} |",
                            cell(t.seed_mean(&m, d, ReportSplit::Base)),
                            cell(t.seed_mean(&m, d, ReportSplit::New)),
                            cell(t.harmonic(&m, d)),
                        );
                    }
                }
            } else {
                let (source, targets) = datasets.split_first().expect("non-empty table");
                let mut header = format!("| Method | {source} (source) |");
                let mut rule = "|---|---|".to_string();
                for d in targets {
                    let _ = write!(header, " {d} |");
                    rule.push_str("---|");
                }
                if !targets.is_empty() {
                    header.push_str(" Average |");
                    rule.push_str("---|");
                }
                let _ = writeln!(out, "{header}\n{rule}");
                for m in t.methods() {
                    let mut line = format!("| {m} | {} |", cell(t.seed_mean(&m, source, ReportSplit::Test)));
                    for d in targets {
                        let _ = write!(line, " {} |", cell(t.seed_mean(&m, d, ReportSplit::Test)));
                    }
                    if !targets.is_empty() {
                        let _ = write!(line, " {} |", cell(t.target_average(&m, targets)));
                    }
                    let _ = writeln!(out, "{line}");
                }
            }
            let _ = writeln!(out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(format_pct(42.9025), "42.90");
        assert_eq!(format_pct(1.005), "1.01");
        assert_eq!(format_pct(68.015), "68.02");
        assert_eq!(format_pct(100.0), "100.00");
        assert_eq!(format_pct(0.0), "0.00");
    }

    #[test]
    fn harmonic_examples() {
        assert_eq!(format_pct(harmonic_mean(50.0, 50.0).unwrap()), "50.00");
        assert!(matches!(harmonic_mean(0.0, 50.0), Err(Error::Contract(_))));
        assert!(harmonic_mean(50.0, -1.0).is_err());
    }

    #[test]
    fn averages() {
        assert_eq!(average_over_targets(&[33.3]).unwrap(), 33.3);
        assert!(average_over_targets(&[]).is_err());
    }

    fn row(dataset: &str, seed: u64, acc: Option<f64>) -> MetricsRow {
        MetricsRow {
            scenario: ScenarioKind::CrossDataset,
            method: "coop+kdpl".into(),
            backbone: "toy".into(),
            dataset: dataset.into(),
            seed,
            split: ReportSplit::Test,
            accuracy: acc,
        }
    }

    #[test]
    fn csv_round_trip_keeps_gaps() {
        let t = MetricsTable {
            rows: vec![row("a", 1, Some(50.125)), row("b", 1, None)],
        };
        let text = t.to_csv().unwrap();
        assert!(text.starts_with("scenario,method,backbone,dataset,seed,split,accuracy\n"));
        assert!(text.contains(",NA"));
        let back = MetricsTable::from_csv(&text).unwrap();
        assert_eq!(back, t);
        assert!(back.is_gap("coop+kdpl", "b"));
        let md = back.summary_markdown();
        assert!(md.contains("| coop+kdpl | 50.13 | n/a | n/a |"), "{md}");
    }

    #[test]
    fn bad_accuracy_reports_line() {
        let text = "scenario,method,backbone,dataset,seed,split,accuracy\ncross_dataset,m,b,d,1,test,140\n";
        assert!(matches!(MetricsTable::from_csv(text), Err(Error::Parse { line: 2, .. })));
    }
}
