//! Train-on-source, evaluate-everywhere scenario runs.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_accuracy, MetricsRow, MetricsTable, ReportSplit};
use crate::class_agnostic::ClassVocabulary;
use crate::data::{sample_few_shot, DatasetProvider, DatasetSplit, LoadedDataset, PreprocessMode};
use crate::distill::{fit, FitReport, Teacher, TeacherPredictionCache, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::DualEncoderModel;
use crate::par;
use crate::prompt::PromptParameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    DomainGeneralization,
    CrossDataset,
    BaseToNovel,
    ClassAgnostic,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::DomainGeneralization,
        ScenarioKind::CrossDataset,
        ScenarioKind::BaseToNovel,
        ScenarioKind::ClassAgnostic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::DomainGeneralization => "domain_generalization",
            ScenarioKind::CrossDataset => "cross_dataset",
            ScenarioKind::BaseToNovel => "base_to_novel",
            ScenarioKind::ClassAgnostic => "class_agnostic",
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub source: String,
    #[serde(default)]
    pub targets: Vec<String>,
    /// Images per class for training; `None` uses the whole train split.
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, source: impl Into<String>, targets: Vec<String>) -> Self {
        Self {
            kind,
            source: source.into(),
            targets,
            shots: Some(16),
            seeds: default_seeds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.shots == Some(0) {
            return Err(Error::Config("shots must be positive".into()));
        }
        match self.kind {
            ScenarioKind::BaseToNovel => {
                if self.targets.iter().any(|t| *t != self.source) {
                    return Err(Error::Config(
                        "base_to_novel evaluates the source dataset only".into(),
                    ));
                }
            }
            _ => {
                if self.targets.contains(&self.source) {
                    return Err(Error::Config(format!(
                        "source {:?} is always evaluated; do not list it as a target",
                        self.source
                    )));
                }
            }
        }
        Ok(())
    }

    /// Targets other than the source, in order.
    pub fn eval_targets(&self) -> &[String] {
        match self.kind {
            ScenarioKind::BaseToNovel => &[],
            _ => &self.targets,
        }
    }
}

/// Everything needed to train and score one method.
pub struct MethodSetup<'a> {
    /// Row label, e.g. `coop+kdpl`.
    pub label: String,
    pub backbone: String,
    pub student: &'a DualEncoderModel,
    pub teacher: Option<&'a Teacher>,
    pub vocabulary: Option<&'a ClassVocabulary>,
    /// `None` scores the hand-crafted zero-shot student.
    pub train: Option<TrainConfig>,
    pub tau: f64,
    pub cache: Option<&'a TeacherPredictionCache>,
}

/// What training touched, for isolation checks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AccessLog {
    pub trained_ids: Vec<String>,
    pub trained_classes: Vec<String>,
}

#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub prompt: Option<PromptParameters>,
    pub report: Option<FitReport>,
    pub table: MetricsTable,
    pub access: AccessLog,
}

fn base_novel_labels(n: usize) -> (Vec<usize>, Vec<usize>) {
    let nb = n.div_ceil(2);
    ((0..nb).collect(), (nb..n).collect())
}

/// Output of [`train_seed`].
#[derive(Debug)]
pub struct TrainedSeed {
    pub prompt: Option<PromptParameters>,
    pub report: Option<FitReport>,
    pub access: AccessLog,
}

/// Fit γ on the source's few-shot episode for `seed` (base classes only for base-to-novel).
pub fn train_seed(
    spec: &ScenarioSpec,
    setup: &MethodSetup<'_>,
    provider: &dyn DatasetProvider,
    seed: u64,
) -> Result<TrainedSeed> {
    spec.validate()?;
    let Some(cfg) = &setup.train else {
        return Ok(TrainedSeed {
            prompt: None,
            report: None,
            access: AccessLog::default(),
        });
    };
    if spec.kind == ScenarioKind::ClassAgnostic && !cfg.objective.uses_vocabulary() {
        return Err(Error::Config(format!(
            "class_agnostic runs need a vocabulary objective, not {}",
            cfg.objective
        )));
    }
    let source = provider.load(&spec.source)?;
    let (base, _) = base_novel_labels(source.splits.classnames.len());
    let train_split = match spec.kind {
        ScenarioKind::BaseToNovel => source.splits.train.restrict(&base),
        _ => source.splits.train.clone(),
    };
    if train_split.is_empty() {
        return Err(Error::Data {
            path: spec.source.clone(),
            msg: "source has no training images".into(),
        });
    }
    let episode = sample_few_shot(&train_split, spec.shots.unwrap_or(usize::MAX), seed)?;
    let samples = source.source.samples(&episode.items, PreprocessMode::Train, seed)?;
    let classes = train_split.class_set()?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut trainer = Trainer::new(
        setup.student,
        setup.teacher,
        &samples,
        &classes,
        setup.vocabulary,
        cfg.clone(),
        setup.cache,
    )?;
    let access = AccessLog {
        trained_ids: samples.iter().map(|s| s.id.clone()).collect(),
        trained_classes: trainer.classes().names().to_vec(),
    };
    let mut gamma = PromptParameters::init(
        cfg.method,
        setup.student,
        cfg.prompt.clone(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let report = fit(&mut trainer, &mut gamma)?;
    Ok(TrainedSeed {
        prompt: Some(gamma),
        report: Some(report),
        access,
    })
}

/// Score the source and every target; unreadable targets become gap rows.
pub fn evaluate_seed(
    spec: &ScenarioSpec,
    setup: &MethodSetup<'_>,
    provider: &dyn DatasetProvider,
    seed: u64,
    prompt: Option<&PromptParameters>,
) -> Result<MetricsTable> {
    spec.validate()?;
    let source = provider.load(&spec.source)?;
    let (base, novel) = base_novel_labels(source.splits.classnames.len());
    let row = |dataset: &str, split: ReportSplit, accuracy: Option<f64>| MetricsRow {
        scenario: spec.kind,
        method: setup.label.clone(),
        backbone: setup.backbone.clone(),
        dataset: dataset.to_string(),
        seed,
        split,
        accuracy,
    };
    let score = |ds: &LoadedDataset, split: &DatasetSplit| -> Result<f64> {
        let samples = ds.source.samples(&split.items, PreprocessMode::Eval, seed)?;
        evaluate_accuracy(setup.student, prompt, &samples, &split.class_set()?, setup.tau)
    };

    let mut table = MetricsTable::default();
    if spec.kind == ScenarioKind::BaseToNovel {
        let test = &source.splits.test;
        table.rows.push(row(&source.name, ReportSplit::Base, Some(score(&source, &test.restrict(&base))?)));
        table.rows.push(row(&source.name, ReportSplit::New, Some(score(&source, &test.restrict(&novel))?)));
        return Ok(table);
    }
    table.rows.push(row(&source.name, ReportSplit::Test, Some(score(&source, &source.splits.test)?)));
    let targets = par::map_slice(spec.eval_targets(), |name| match provider.load(name) {
        Ok(ds) => score(&ds, &ds.splits.test).map(Some),
        Err(Error::Data { path, msg }) => {
            log::warn!("target {name} skipped ({path}: {msg})");
            Ok(None)
        }
        Err(e) => Err(e),
    });
    for (name, acc) in spec.eval_targets().iter().zip(targets) {
        table.rows.push(row(name, ReportSplit::Test, acc?));
    }
    Ok(table)
}

/// Train for one seed, then score the source and every target.
pub fn run_seed(
    spec: &ScenarioSpec,
    setup: &MethodSetup<'_>,
    provider: &dyn DatasetProvider,
    seed: u64,
) -> Result<SeedOutcome> {
    let trained = train_seed(spec, setup, provider, seed)?;
    let table = evaluate_seed(spec, setup, provider, seed, trained.prompt.as_ref())?;
    Ok(SeedOutcome {
        seed,
        prompt: trained.prompt,
        report: trained.report,
        table,
        access: trained.access,
    })
}

/// Every seed of `spec`, rows in seed order.
pub fn run_scenario(
    spec: &ScenarioSpec,
    setup: &MethodSetup<'_>,
    provider: &dyn DatasetProvider,
) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    for &seed in &spec.seeds {
        table.extend(run_seed(spec, setup, provider, seed)?.table);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let ok = ScenarioSpec::new(ScenarioKind::CrossDataset, "a", vec!["b".into()]);
        ok.validate().unwrap();
        assert_eq!(ok.seeds, vec![1, 2, 3]);
        let mut bad = ok.clone();
        bad.targets.push("a".into());
        assert!(bad.validate().is_err());
        let b2n = ScenarioSpec::new(ScenarioKind::BaseToNovel, "a", vec!["b".into()]);
        assert!(b2n.validate().is_err());
        let mut dup = ok.clone();
        dup.seeds = vec![1, 1];
        assert!(dup.validate().is_err());
        assert_eq!("class_agnostic".parse::<ScenarioKind>().unwrap(), ScenarioKind::ClassAgnostic);
    }

    #[test]
    fn base_novel_rule() {
        assert_eq!(base_novel_labels(5), (vec![0, 1, 2], vec![3, 4]));
        assert_eq!(base_novel_labels(20).0.len(), 10);
    }
}
