//! Config-driven runs: manifest, per-seed training and evaluation with resume, artifacts.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! manifest.json            resolved config, written before any training
//! run_stats.json           timings, cache statistics, failed seeds
//! results.csv              every per-seed row
//! summary.md               seed means in table form
//! comparison.svg           per-dataset bars, one series per method
//! seeds/seed-<s>/          prompt.safetensors, fit.json, results.csv
//! ```
//!
//! A seed whose `results.csv` exists is not rerun; a seed with a saved prompt
//! but no results is only re-evaluated.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class_agnostic::ClassVocabulary;
use crate::config::{parse_config, ExperimentConfig};
use crate::data::{generate_synthetic, sample_few_shot, DatasetProvider, DirectoryProvider, PreprocessMode};
use crate::distill::student::STUDENT_TEMPLATE;
use crate::distill::{CacheStats, FitReport, Teacher, TeacherPredictionCache, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_seed, train_seed, MetricsTable, MethodSetup, ReportSplit, ScenarioKind, ScenarioSpec,
};
use crate::model::DualEncoderModel;
use crate::plot::emit_comparison_plot;
use crate::prompt::PromptParameters;

pub const MANIFEST_FORMAT: &str = "kdpl-run/1";
pub const ZERO_SHOT_LABEL: &str = "zero_shot";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Every input that influences the numbers in `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    /// SHA-256 of `config`, `train`, and the checkpoint digests.
    pub config_hash: String,
    pub label: String,
    /// The parsed config with machine-local paths cleared.
    pub config: ExperimentConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioSpec,
    pub student_template: String,
    pub student_sha256: Option<String>,
    pub teacher_sha256: Option<String>,
}

impl RunManifest {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let mut portable = cfg.clone();
        portable.output_dir = PathBuf::from(".");
        portable.cache_dir = None;
        portable.data_root = None;
        let digest = |p: Option<PathBuf>| -> Result<Option<String>> {
            p.map(|p| {
                std::fs::read(&p).map(|b| sha256_hex(&b)).map_err(|e| Error::Data {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })
            })
            .transpose()
        };
        let student_sha256 = digest(cfg.student_path())?;
        let teacher_sha256 = if cfg.objective.uses_teacher() {
            digest(cfg.teacher_path())?
        } else {
            None
        };
        let train = cfg.train_config();
        let hash_input = serde_json::to_vec(&(&portable, &train, &student_sha256, &teacher_sha256))?;
        Ok(Self {
            format: MANIFEST_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: sha256_hex(&hash_input),
            label: cfg.label(),
            scenario: cfg.scenario_spec(),
            config: portable,
            train,
            student_template: STUDENT_TEMPLATE.into(),
            student_sha256,
            teacher_sha256,
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seed: Option<u64>,
    pub seconds: f64,
    pub resumed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// Run facts that vary between otherwise identical runs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunStats {
    pub config_hash: String,
    pub stages: Vec<StageTiming>,
    pub cache: Option<CacheStats>,
    pub completed_seeds: Vec<u64>,
    pub failed_seeds: Vec<SeedFailure>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub table: MetricsTable,
    pub manifest: RunManifest,
    pub stats: RunStats,
}

impl ExperimentOutcome {
    pub fn complete(&self) -> bool {
        self.stats.failed_seeds.is_empty()
    }
}

/// Models, data and teacher resolved from a config.
pub struct Workspace {
    pub student: DualEncoderModel,
    pub teacher: Option<Teacher>,
    /// Identity of the teacher, its template, and its temperature.
    pub teacher_key: Option<String>,
    pub provider: Box<dyn DatasetProvider>,
    pub vocabulary: Option<ClassVocabulary>,
    pub backbone: String,
}

impl Workspace {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (student, teacher_model, provider, synthetic_vocab): (_, _, Box<dyn DatasetProvider>, _) =
            if cfg.is_synthetic() {
                let world = generate_synthetic(&cfg.synthetic)?;
                log::info!(
                    "synthetic world: teacher accuracy {:.2}% on {}",
                    world.teacher_accuracy * 100.0,
                    world.source.name
                );
                let vocab = world.vocabulary.clone();
                (world.student.clone(), Some(world.teacher.clone()), Box::new(world), Some(vocab))
            } else {
                let student = DualEncoderModel::load(&cfg.student_path().unwrap())?;
                let teacher = if cfg.objective.uses_teacher() {
                    Some(DualEncoderModel::load(&cfg.teacher_path().unwrap())?)
                } else {
                    None
                };
                let root = cfg.data_root().expect("validated");
                let provider = DirectoryProvider::new(root, student.config().num_patches);
                (student, teacher, Box::new(provider), None)
            };
        let (teacher, teacher_key) = match teacher_model {
            Some(m) if cfg.objective.uses_teacher() => {
                let mut h = Sha256::new();
                h.update(m.to_bytes()?);
                h.update(cfg.teacher_template.as_bytes());
                h.update(cfg.tau.to_le_bytes());
                let key: String = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
                (Some(Teacher::new(m, &cfg.teacher_template, cfg.tau)?), Some(key))
            }
            _ => (None, None),
        };
        let vocabulary = match (cfg.vocabulary.as_deref(), cfg.vocabulary_path()) {
            (None, _) => None,
            (Some(_), Some(path)) => Some(ClassVocabulary::load(&path)?),
            (Some(_), None) => Some(ClassVocabulary::new(synthetic_vocab.expect("validated"))?),
        };
        Ok(Self {
            student,
            teacher,
            teacher_key,
            provider,
            vocabulary,
            backbone: if cfg.is_synthetic() {
                "synthetic".into()
            } else {
                cfg.student.clone()
            },
        })
    }

    pub fn open_cache(&self, cfg: &ExperimentConfig) -> Result<Option<TeacherPredictionCache>> {
        let Some(key) = &self.teacher_key else {
            return Ok(None);
        };
        let dir = cfg.cache_dir();
        std::fs::create_dir_all(&dir)?;
        Ok(Some(TeacherPredictionCache::open(&dir.join(format!("teacher-{key}.kdplc")))?))
    }

    fn setup<'a>(
        &'a self,
        cfg: &ExperimentConfig,
        cache: Option<&'a TeacherPredictionCache>,
        trained: bool,
    ) -> MethodSetup<'a> {
        MethodSetup {
            label: if trained { cfg.label() } else { ZERO_SHOT_LABEL.into() },
            backbone: self.backbone.clone(),
            student: &self.student,
            teacher: self.teacher.as_ref(),
            vocabulary: self.vocabulary.as_ref(),
            train: trained.then(|| cfg.train_config()),
            tau: cfg.tau,
            cache,
        }
    }
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join("seeds").join(format!("seed-{seed}"))
}

/// Write through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct FitRecord<'a> {
    report: &'a FitReport,
    trained_images: usize,
    trained_classes: usize,
}

fn run_one_seed(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    cache: Option<&TeacherPredictionCache>,
    seed: u64,
    stats: &mut RunStats,
) -> Result<MetricsTable> {
    let dir = seed_dir(cfg, seed);
    let rows_path = dir.join("results.csv");
    if rows_path.exists() {
        stats.stages.push(StageTiming {
            stage: "evaluate".into(),
            seed: Some(seed),
            seconds: 0.0,
            resumed: true,
        });
        return MetricsTable::read_csv(&rows_path);
    }
    std::fs::create_dir_all(&dir)?;
    let spec = cfg.scenario_spec();
    let trained = ws.setup(cfg, cache, true);
    let prompt_path = dir.join("prompt.safetensors");
    let t0 = Instant::now();
    let prompt = if prompt_path.exists() {
        stats.stages.push(StageTiming {
            stage: "train".into(),
            seed: Some(seed),
            seconds: 0.0,
            resumed: true,
        });
        PromptParameters::load(&prompt_path)?
    } else {
        let out = train_seed(&spec, &trained, ws.provider.as_ref(), seed)?;
        let prompt = out.prompt.expect("trained setup yields a prompt");
        let record = FitRecord {
            report: out.report.as_ref().expect("trained setup yields a report"),
            trained_images: out.access.trained_ids.len(),
            trained_classes: out.access.trained_classes.len(),
        };
        write_atomic(&dir.join("fit.json"), &serde_json::to_vec_pretty(&record)?)?;
        write_atomic(&prompt_path, &prompt.to_bytes()?)?;
        stats.stages.push(StageTiming {
            stage: "train".into(),
            seed: Some(seed),
            seconds: t0.elapsed().as_secs_f64(),
            resumed: false,
        });
        prompt
    };
    let t1 = Instant::now();
    let mut table = evaluate_seed(&spec, &trained, ws.provider.as_ref(), seed, Some(&prompt))?;
    if cfg.zero_shot_baseline {
        let zs = ws.setup(cfg, cache, false);
        table.extend(evaluate_seed(&spec, &zs, ws.provider.as_ref(), seed, None)?);
    }
    write_atomic(&rows_path, table.to_csv()?.as_bytes())?;
    stats.stages.push(StageTiming {
        stage: "evaluate".into(),
        seed: Some(seed),
        seconds: t1.elapsed().as_secs_f64(),
        resumed: false,
    });
    Ok(table)
}

/// Check or write the manifest; a different existing manifest is an error.
fn claim_output_dir(cfg: &ExperimentConfig, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("manifest.json");
    if path.exists() {
        let existing: RunManifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        if existing != *manifest {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration; pick another output_dir",
                cfg.output_dir.display()
            )));
        }
        log::info!("resuming run {}", manifest.config_hash);
        return Ok(());
    }
    write_atomic(&path, &serde_json::to_vec_pretty(manifest)?)
}

/// Train and evaluate every seed, then write the merged artifacts.
///
/// A failing seed is recorded and the remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let manifest = RunManifest::build(cfg)?;
    claim_output_dir(cfg, &manifest)?;
    let mut stats = RunStats {
        config_hash: manifest.config_hash.clone(),
        ..Default::default()
    };
    let t0 = Instant::now();
    let ws = Workspace::prepare(cfg)?;
    stats.stages.push(StageTiming {
        stage: "prepare".into(),
        seed: None,
        seconds: t0.elapsed().as_secs_f64(),
        resumed: false,
    });
    let cache = ws.open_cache(cfg)?;
    let mut table = MetricsTable::default();
    for &seed in &cfg.seeds {
        match run_one_seed(cfg, &ws, cache.as_ref(), seed, &mut stats) {
            Ok(t) => {
                table.extend(t);
                stats.completed_seeds.push(seed);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                stats.failed_seeds.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    stats.cache = cache.as_ref().map(|c| c.stats());
    write_artifacts(cfg, &table)?;
    write_atomic(
        &cfg.output_dir.join("run_stats.json"),
        &serde_json::to_vec_pretty(&stats)?,
    )?;
    Ok(ExperimentOutcome {
        table,
        manifest,
        stats,
    })
}

fn write_artifacts(cfg: &ExperimentConfig, table: &MetricsTable) -> Result<()> {
    write_atomic(&cfg.output_dir.join("results.csv"), table.to_csv()?.as_bytes())?;
    write_atomic(&cfg.output_dir.join("summary.md"), table.summary_markdown().as_bytes())?;
    if !table.rows.is_empty() {
        let split = if cfg.scenario == ScenarioKind::BaseToNovel {
            ReportSplit::New
        } else {
            ReportSplit::Test
        };
        let svg = emit_comparison_plot(std::slice::from_ref(table), split)?;
        write_atomic(&cfg.output_dir.join("comparison.svg"), svg.as_bytes())?;
    }
    Ok(())
}

/// Re-score saved prompts (and the zero-shot student) without training.
pub fn evaluate_experiment(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let ws = Workspace::prepare(cfg)?;
    let spec = cfg.scenario_spec();
    let mut table = MetricsTable::default();
    for &seed in &cfg.seeds {
        let path = seed_dir(cfg, seed).join("prompt.safetensors");
        let prompt = PromptParameters::load(&path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: format!("no trained prompt for seed {seed}: {e}"),
        })?;
        table.extend(evaluate_seed(&spec, &ws.setup(cfg, None, true), ws.provider.as_ref(), seed, Some(&prompt))?);
        if cfg.zero_shot_baseline {
            table.extend(evaluate_seed(&spec, &ws.setup(cfg, None, false), ws.provider.as_ref(), seed, None)?);
        }
    }
    Ok(table)
}

/// Teacher predictions for every source training image, stored in the cache.
pub fn warm_cache(cfg: &ExperimentConfig) -> Result<CacheStats> {
    cfg.validate()?;
    let ws = Workspace::prepare(cfg)?;
    let (Some(teacher), Some(cache)) = (ws.teacher.as_ref(), ws.open_cache(cfg)?) else {
        return Err(Error::Config(format!(
            "{} does not use teacher predictions; nothing to cache",
            cfg.objective
        )));
    };
    let source = ws.provider.load(&cfg.source)?;
    let mut split = source.splits.train.clone();
    if cfg.scenario == ScenarioKind::BaseToNovel {
        let nb = split.classnames.len().div_ceil(2);
        split = split.restrict(&(0..nb).collect::<Vec<_>>());
    }
    let classes = split.class_set()?;
    // the union of every seed's episode equals the split when shots cover it
    let mut items = Vec::new();
    for &seed in &cfg.seeds {
        for it in sample_few_shot(&split, cfg.shots, seed)?.items {
            if !items.contains(&it) {
                items.push(it);
            }
        }
    }
    for &seed in &cfg.seeds {
        let samples = source.source.samples(&items, PreprocessMode::Train, seed)?;
        let refs: Vec<_> = samples.iter().map(|s| (s.id.as_str(), &s.image)).collect();
        teacher.predict(&refs, &classes, Some(&cache))?;
    }
    Ok(cache.stats())
}

/// One run per value of `key`, each in its own subdirectory; rows are labeled `label key=value`.
pub fn run_sweep(
    text: &str,
    overrides: &[String],
    key: &str,
    values: &[String],
) -> Result<(MetricsTable, Vec<ExperimentOutcome>)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    // validate every point before any compute
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut o = overrides.to_vec();
            o.push(format!("{key}={v}"));
            let mut cfg = parse_config(text, &o)?;
            cfg.label = Some(format!("{} {key}={v}", cfg.label()));
            cfg.output_dir = cfg.output_dir.join(format!("sweep-{key}-{v}"));
            cfg.zero_shot_baseline &= i == 0;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let base = parse_config(text, overrides)?.output_dir;
    let mut table = MetricsTable::default();
    let mut outcomes = Vec::new();
    for cfg in &configs {
        let out = run_experiment(cfg)?;
        table.extend(out.table.clone());
        outcomes.push(out);
    }
    std::fs::create_dir_all(&base)?;
    write_atomic(&base.join(format!("sweep-{key}.csv")), table.to_csv()?.as_bytes())?;
    write_atomic(&base.join(format!("sweep-{key}.md")), table.summary_markdown().as_bytes())?;
    Ok((table, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(dir: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
name = "quick"
method = "coop"
objective = "kdpl"
scenario = "cross_dataset"
source = "synth"
targets = ["synth_cross1", "missing"]
seeds = [1, 2]
shots = 2
output_dir = {:?}

[coop]
epochs = 2

[synthetic]
train_per_class = 4
val_per_class = 1
test_per_class = 3
distractors = 5
"#,
            dir.display().to_string()
        );
        parse_config(&text, &[]).unwrap()
    }

    #[test]
    fn artifacts_gaps_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(dir.path());
        let out = run_experiment(&cfg).unwrap();
        assert!(out.complete());
        for f in ["manifest.json", "run_stats.json", "results.csv", "summary.md", "comparison.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(out.table.is_gap("coop+kdpl", "missing"));
        // 2 seeds × 3 datasets × (method + zero-shot)
        assert_eq!(out.table.rows.len(), 12);
        let first = std::fs::read(dir.path().join("results.csv")).unwrap();

        // a resumed run reads everything back and writes the same file
        let again = run_experiment(&cfg).unwrap();
        assert!(again.stats.stages.iter().filter(|s| s.seed.is_some()).all(|s| s.resumed));
        assert_eq!(std::fs::read(dir.path().join("results.csv")).unwrap(), first);

        // only the evaluation stage reruns when its output is gone
        std::fs::remove_file(seed_dir(&cfg, 2).join("results.csv")).unwrap();
        let third = run_experiment(&cfg).unwrap();
        let train2 = third.stats.stages.iter().find(|s| s.stage == "train" && s.seed == Some(2)).unwrap();
        assert!(train2.resumed);
        assert_eq!(std::fs::read(dir.path().join("results.csv")).unwrap(), first);

        let mut other = cfg.clone();
        other.coop.epochs = Some(3);
        assert!(matches!(run_experiment(&other), Err(Error::Config(_))));
    }
}
