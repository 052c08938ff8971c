//! Declarative experiment configuration.
//!
//! A TOML document with top-level keys plus one optional section per prompt
//! method (`[coop]`, `[maple]`, ...). Only the selected method's section is
//! applied. `--set key=value` overrides are merged into the document before it
//! is deserialized, so they obey the same schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::class_agnostic::DEFAULT_TOP_K;
use crate::data::SyntheticVLConfig;
use crate::distill::teacher::TEACHER_TEMPLATE;
use crate::distill::{KlMode, Objective, TrainConfig, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::eval::{ScenarioKind, ScenarioSpec};
use crate::model::{DualEncoderModel, ImageBackbone, Role};
use crate::prompt::{CouplingMode, PromptMethod};

pub const DATA_ROOT_ENV: &str = "KDPL_DATA_ROOT";
pub const CACHE_ROOT_ENV: &str = "KDPL_CACHE_ROOT";

/// Backbone id meaning "generate the planted world".
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub warmup_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub n_ctx: Option<usize>,
    pub n_visual: Option<usize>,
    pub depth: Option<usize>,
    pub init_text: Option<String>,
    pub coupling: Option<CouplingMode>,
    pub init_std: Option<f64>,
    pub text_l1: Option<f64>,
    pub image_l1: Option<f64>,
    pub kl_weight: Option<f64>,
    pub gauss_mean: Option<f64>,
    pub gauss_std: Option<f64>,
}

fn default_backbone() -> String {
    SYNTHETIC.into()
}
fn default_template() -> String {
    TEACHER_TEMPLATE.into()
}
fn default_shots() -> usize {
    16
}
fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: PromptMethod,
    pub objective: Objective,
    /// Row label; defaults to `method+objective`.
    #[serde(default)]
    pub label: Option<String>,
    /// `synthetic`, or a student checkpoint path.
    #[serde(default = "default_backbone")]
    pub student: String,
    /// `synthetic`, or a teacher checkpoint path.
    #[serde(default = "default_backbone")]
    pub teacher: String,
    #[serde(default = "default_template")]
    pub teacher_template: String,
    pub scenario: ScenarioKind,
    pub source: String,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub kl_mode: KlMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Name list for class-agnostic objectives; `synthetic` uses the generated one.
    #[serde(default)]
    pub vocabulary: Option<String>,
    /// Also score the hand-crafted student.
    #[serde(default = "default_true")]
    pub zero_shot_baseline: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Falls back to `KDPL_CACHE_ROOT`, then `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Falls back to `KDPL_DATA_ROOT`; unused for synthetic runs.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticVLConfig,
    #[serde(default)]
    pub coop: MethodOverrides,
    #[serde(default)]
    pub cocoop: MethodOverrides,
    #[serde(default)]
    pub vpt_shallow: MethodOverrides,
    #[serde(default)]
    pub vpt_deep: MethodOverrides,
    #[serde(default)]
    pub maple: MethodOverrides,
    #[serde(default)]
    pub promptsrc: MethodOverrides,
}

fn toml_line(text: &str, err: &toml::de::Error) -> usize {
    err.span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0)
}

/// Set `a.b.c = value` in a TOML table; `value` is TOML if it parses, else a string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parse, apply overrides, fill defaults, and validate.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
        line: toml_line(text, &e),
        msg: e.message().to_string(),
    })?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_config(&text, overrides)
}

impl ExperimentConfig {
    pub fn is_synthetic(&self) -> bool {
        self.student == SYNTHETIC
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}+{}", self.method, self.objective))
    }

    pub fn overrides(&self) -> &MethodOverrides {
        match self.method {
            PromptMethod::Coop => &self.coop,
            PromptMethod::Cocoop => &self.cocoop,
            PromptMethod::VptShallow => &self.vpt_shallow,
            PromptMethod::VptDeep => &self.vpt_deep,
            PromptMethod::Maple => &self.maple,
            PromptMethod::Promptsrc => &self.promptsrc,
        }
    }

    /// Per-method defaults with this config's overrides applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::for_method(self.method, self.objective);
        let o = self.overrides();
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = o.$field.clone() { $target = v; })*
            };
        }
        set!(
            epochs => c.epochs,
            batch_size => c.batch_size,
            lr => c.lr,
            warmup_epochs => c.warmup_epochs,
            warmup_lr => c.warmup_lr,
            momentum => c.momentum,
            weight_decay => c.weight_decay,
            n_ctx => c.prompt.n_ctx,
            n_visual => c.prompt.n_visual,
            depth => c.prompt.depth,
            init_text => c.prompt.init_text,
            coupling => c.prompt.coupling,
            init_std => c.prompt.init_std,
            text_l1 => c.promptsrc.weights.text_l1,
            image_l1 => c.promptsrc.weights.image_l1,
            kl_weight => c.promptsrc.weights.kl,
            gauss_mean => c.promptsrc.gauss_mean,
            gauss_std => c.promptsrc.gauss_std,
        );
        c.top_k = self.top_k;
        c.distill.kl_mode = self.kl_mode;
        c.distill.tau_student = self.tau;
        c.distill.tau_teacher = self.tau;
        c
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            kind: self.scenario,
            source: self.source.clone(),
            targets: self.targets.clone(),
            shots: Some(self.shots),
            seeds: self.seeds.clone(),
        }
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = PathBuf::from(p);
        match self.data_root() {
            Some(root) if path.is_relative() && !path.exists() => root.join(path),
            _ => path,
        }
    }

    pub fn student_path(&self) -> Option<PathBuf> {
        (!self.is_synthetic()).then(|| self.resolve(&self.student))
    }

    pub fn teacher_path(&self) -> Option<PathBuf> {
        (!self.is_synthetic()).then(|| self.resolve(&self.teacher))
    }

    pub fn vocabulary_path(&self) -> Option<PathBuf> {
        match self.vocabulary.as_deref() {
            None | Some(SYNTHETIC) => None,
            Some(p) => Some(self.resolve(p)),
        }
    }

    /// Everything checkable without building models or touching datasets.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        let spec = self.scenario_spec();
        spec.validate()?;
        let train = self.train_config();
        train.validate()?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.scenario == ScenarioKind::ClassAgnostic && !self.objective.uses_vocabulary() {
            return Err(Error::Config(format!(
                "class_agnostic scenarios need ca_kdpl or pomp_star, not {}",
                self.objective
            )));
        }
        if self.objective.uses_vocabulary() {
            match self.vocabulary.as_deref() {
                None => {
                    return Err(Error::Config(format!(
                        "{} needs a vocabulary path",
                        self.objective
                    )))
                }
                Some(SYNTHETIC) if !self.is_synthetic() => {
                    return Err(Error::Config(
                        "the synthetic vocabulary exists only in synthetic runs".into(),
                    ))
                }
                _ => {}
            }
        }
        if self.teacher_template.matches("{}").count() != 1 {
            return Err(Error::Config(format!(
                "teacher_template {:?} must contain exactly one {{}}",
                self.teacher_template
            )));
        }
        if self.is_synthetic() != (self.teacher == SYNTHETIC) {
            return Err(Error::Config(
                "student and teacher must both be synthetic or both be checkpoints".into(),
            ));
        }
        if self.is_synthetic() {
            self.synthetic.validate()?;
            // the planted world always has a ViT student
            return Ok(());
        }
        if self.data_root().is_none() {
            return Err(Error::Config(format!(
                "checkpoint runs need data_root or {DATA_ROOT_ENV}"
            )));
        }
        let (student_cfg, student_role) = DualEncoderModel::peek(&self.student_path().unwrap())?;
        if student_role != Role::Student {
            return Err(Error::Config(format!("{} is not a student checkpoint", self.student)));
        }
        if self.method.needs_vit() && student_cfg.image_backbone != ImageBackbone::Vit {
            return Err(Error::UnsupportedBackbone(format!(
                "{} injects visual prompts and needs a ViT student",
                self.method
            )));
        }
        if self.objective.uses_teacher() {
            let (_, role) = DualEncoderModel::peek(&self.teacher_path().unwrap())?;
            if role != Role::Teacher {
                return Err(Error::Config(format!("{} is not a teacher checkpoint", self.teacher)));
            }
        }
        Ok(())
    }
}
