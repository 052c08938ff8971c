//! Prompt-only training: objectives, schedule, optimizer, and the epoch loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::TeacherPredictionCache;
use super::student::{self, class_token_sequences};
use super::teacher::{ImageRef, Teacher};
use super::{ce_loss_graph, kd_loss_graph, DistillationConfig};
use crate::autograd::Graph;
use crate::class_agnostic::{
    mean_over_batch, pomp_star_select, select_topk, softmax_rows_scaled, ClassVocabulary,
    SelectionResult, DEFAULT_TOP_K,
};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ClassSet, DualEncoderModel, ImageInput, TokenSequence};
use crate::prompt::promptsrc::{regularizer_graph, TEMPLATE_BANK};
use crate::prompt::{gaussian_aggregate, PromptMethod, PromptOptions, PromptParameters, RegularizerWeights};
use crate::tensor::Tensor;

/// What the student is fitted against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on ground-truth labels.
    Plain,
    /// KL to teacher distributions over the known class names.
    Kdpl,
    /// KL over K names picked per batch from a vocabulary.
    CaKdpl,
    /// Cross-entropy on the teacher's argmax labels, fixed once per episode.
    UplStar,
    /// Cross-entropy over true classes plus random vocabulary supplements.
    PompStar,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Plain,
        Objective::Kdpl,
        Objective::CaKdpl,
        Objective::UplStar,
        Objective::PompStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Plain => "plain",
            Objective::Kdpl => "kdpl",
            Objective::CaKdpl => "ca_kdpl",
            Objective::UplStar => "upl_star",
            Objective::PompStar => "pomp_star",
        }
    }

    pub fn uses_labels(self) -> bool {
        matches!(self, Objective::Plain | Objective::PompStar)
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, Objective::Kdpl | Objective::CaKdpl | Objective::UplStar)
    }

    pub fn uses_vocabulary(self) -> bool {
        matches!(self, Objective::CaKdpl | Objective::PompStar)
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSrcConfig {
    pub weights: RegularizerWeights,
    pub gauss_mean: f64,
    pub gauss_std: f64,
}

impl Default for PromptSrcConfig {
    fn default() -> Self {
        Self {
            weights: RegularizerWeights::default(),
            gauss_mean: 15.0,
            gauss_std: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: PromptMethod,
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub top_k: usize,
    pub distill: DistillationConfig,
    pub prompt: PromptOptions,
    pub promptsrc: PromptSrcConfig,
}

impl TrainConfig {
    /// Per-method batch size, learning rate, and epochs.
    pub fn for_method(method: PromptMethod, objective: Objective) -> Self {
        let (batch_size, lr, epochs) = match method {
            PromptMethod::Coop => (32, 0.02, 50),
            PromptMethod::Cocoop => (1, 0.02, 10),
            PromptMethod::VptShallow | PromptMethod::VptDeep => (4, 0.0025, 5),
            PromptMethod::Maple => (4, 0.0035, 5),
            PromptMethod::Promptsrc => (4, 0.0025, 20),
        };
        Self {
            method,
            objective,
            epochs,
            batch_size,
            lr,
            warmup_epochs: 1,
            warmup_lr: 1e-5,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 1,
            top_k: DEFAULT_TOP_K,
            distill: DistillationConfig::default(),
            prompt: PromptOptions::for_method(method),
            promptsrc: PromptSrcConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("warmup_lr", self.warmup_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.method == PromptMethod::Promptsrc && !(self.promptsrc.gauss_std > 0.0) {
            return Err(Error::Config("promptsrc.gauss_std must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            warmup_lr: self.warmup_lr,
        }
    }
}

/// Constant warm-up, then cosine decay indexed by absolute epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
}

impl LrSchedule {
    /// Learning rate for 0-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.warmup_lr;
        }
        let t = epoch as f64 / self.epochs.max(1) as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// SGD with optional momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract("gradient count does not match parameters".into()));
        }
        let mut updates: Vec<Tensor> = params
            .iter()
            .zip(grads)
            .map(|(p, g)| {
                let mut d = g.clone();
                if self.weight_decay != 0.0 {
                    d.axpy(self.weight_decay, p);
                }
                d
            })
            .collect();
        if self.momentum != 0.0 {
            match &mut self.velocity {
                None => self.velocity = Some(updates.clone()),
                Some(v) => {
                    for (vi, di) in v.iter_mut().zip(&updates) {
                        *vi = vi.scale(self.momentum).add(di);
                    }
                    updates = v.clone();
                }
            }
        }
        for (p, d) in params.into_iter().zip(&updates) {
            p.axpy(-lr, d);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub selection: Option<SelectionResult>,
}

/// Frozen-encoder anchors for the PromptSRC regularizer.
struct Anchors {
    text: Tensor,
    image: Tensor,
}

/// Everything precomputed for one training episode.
pub struct Trainer<'a> {
    student: &'a DualEncoderModel,
    teacher: Option<&'a Teacher>,
    config: TrainConfig,
    samples: &'a [Sample],
    /// Label space of the student head: dataset classes, or the vocabulary.
    classes: ClassSet,
    vocabulary: Option<ClassVocabulary>,
    class_tokens: Vec<TokenSequence>,
    frozen_images: Option<Tensor>,
    teacher_probs: Option<Tensor>,
    pseudo_labels: Option<Vec<usize>>,
    teacher_images: Option<Tensor>,
    teacher_vocab_text: Option<Arc<Tensor>>,
    vocab_labels: Option<Vec<usize>>,
    anchors: Option<Anchors>,
    sgd: Sgd,
    steps: u64,
}

impl std::fmt::Debug for Trainer<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.config)
            .field("samples", &self.samples.len())
            .field("classes", &self.classes.len())
            .finish_non_exhaustive()
    }
}

fn refs(samples: &[Sample]) -> Vec<ImageRef<'_>> {
    samples.iter().map(|s| (s.id.as_str(), &s.image)).collect()
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(rows.len(), t.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(t.row(r));
    }
    out
}

fn gather_cols(t: &Tensor, cols: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), cols.len());
    for r in 0..t.rows() {
        for (j, &c) in cols.iter().enumerate() {
            out.set(r, j, t.get(r, c));
        }
    }
    out
}

impl<'a> Trainer<'a> {
    /// Precompute frozen features, teacher targets, and pseudo-labels.
    ///
    /// `dataset_classes` names the labels of `samples`; `vocabulary` is the
    /// selection pool for class-agnostic and supplement objectives.
    pub fn new(
        student: &'a DualEncoderModel,
        teacher: Option<&'a Teacher>,
        samples: &'a [Sample],
        dataset_classes: &ClassSet,
        vocabulary: Option<&ClassVocabulary>,
        config: TrainConfig,
        cache: Option<&TeacherPredictionCache>,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Contract("no training samples".into()));
        }
        if config.method.needs_vit() && !student.has_vit() {
            return Err(Error::UnsupportedBackbone(format!(
                "{} needs a ViT student",
                config.method
            )));
        }
        let objective = config.objective;
        let teacher = if objective.uses_teacher() {
            Some(teacher.ok_or_else(|| Error::Config(format!("{objective} needs a teacher")))?)
        } else {
            teacher
        };
        let vocabulary = if objective.uses_vocabulary() {
            Some(
                vocabulary
                    .ok_or_else(|| Error::Config(format!("{objective} needs a class vocabulary")))?
                    .clone(),
            )
        } else {
            None
        };
        let classes = match &vocabulary {
            Some(v) => v.class_set().clone(),
            None => dataset_classes.clone(),
        };
        // contexts come from γ; the tokens here are what follows them
        let probe = PromptParameters::init(
            config.method,
            student,
            config.prompt.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let class_tokens = class_token_sequences(student, Some(&probe), classes.names())?;
        let images: Vec<&ImageInput> = samples.iter().map(|s| &s.image).collect();
        let frozen_images = if config.method.needs_vit() {
            None
        } else {
            Some(student::image_features(student, None, &images)?)
        };
        let mut teacher_probs = None;
        let mut pseudo_labels = None;
        let mut teacher_images = None;
        let mut teacher_vocab_text = None;
        let mut vocab_labels = None;
        match objective {
            Objective::Kdpl | Objective::UplStar => {
                let t = teacher.unwrap();
                let dists = t.predict(&refs(samples), &classes, cache)?;
                let rows: Vec<Vec<f64>> = dists.iter().map(|d| d.probs().to_vec()).collect();
                if objective == Objective::UplStar {
                    pseudo_labels = Some(dists.iter().map(|d| d.argmax()).collect());
                }
                teacher_probs = Some(Tensor::from_rows(&rows)?);
            }
            Objective::CaKdpl => {
                let t = teacher.unwrap();
                teacher_vocab_text = Some(t.text_features(&classes)?);
                teacher_images = Some(t.image_features(&refs(samples))?);
            }
            Objective::PompStar => {
                let v = vocabulary.as_ref().unwrap();
                let map = samples
                    .iter()
                    .map(|s| {
                        let name = dataset_classes.names().get(s.label).ok_or_else(|| {
                            Error::Contract(format!("label {} outside the dataset classes", s.label))
                        })?;
                        v.index_of(name).ok_or_else(|| {
                            Error::Config(format!("class {name:?} missing from the vocabulary"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                vocab_labels = Some(map);
            }
            Objective::Plain => {
                if let Some(s) = samples.iter().find(|s| s.label >= classes.len()) {
                    return Err(Error::Contract(format!(
                        "label {} outside {} classes",
                        s.label,
                        classes.len()
                    )));
                }
            }
        }
        let anchors = if config.method == PromptMethod::Promptsrc {
            Some(Self::anchors(student, &classes, &images)?)
        } else {
            None
        };
        let sgd = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self {
            student,
            teacher,
            config,
            samples,
            classes,
            vocabulary,
            class_tokens,
            frozen_images,
            teacher_probs,
            pseudo_labels,
            teacher_images,
            teacher_vocab_text,
            vocab_labels,
            anchors,
            sgd,
            steps: 0,
        })
    }

    fn anchors(student: &DualEncoderModel, classes: &ClassSet, images: &[&ImageInput]) -> Result<Anchors> {
        let mut text = Tensor::zeros(classes.len(), student.config().shared_dim);
        for template in TEMPLATE_BANK {
            let tokens = student.build_handcrafted_prompts(classes, template)?;
            text.add_assign(&student::text_features(student, None, &tokens)?);
        }
        for r in 0..text.rows() {
            let n = crate::tensor::l2_norm(text.row(r));
            text.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        Ok(Anchors {
            text,
            image: student::image_features(student, None, images)?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        self.samples
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn pseudo_labels(&self) -> Option<&[usize]> {
        self.pseudo_labels.as_deref()
    }

    /// Teacher distributions over the known classes (Kdpl and UplStar only).
    pub fn teacher_targets(&self) -> Option<&Tensor> {
        self.teacher_probs.as_ref()
    }

    /// Class-agnostic selection for a batch: top-K of the batch-mean teacher distribution.
    pub fn ca_select(&self, batch: &[usize]) -> Result<(SelectionResult, Tensor)> {
        let (Some(img), Some(text), Some(vocab), Some(t)) = (
            &self.teacher_images,
            &self.teacher_vocab_text,
            &self.vocabulary,
            self.teacher,
        ) else {
            return Err(Error::Contract("trainer is not class-agnostic".into()));
        };
        let cos = gather_rows(img, batch).matmul_t(text);
        let p = softmax_rows_scaled(&cos, t.tau());
        let sel = select_topk(&mean_over_batch(&p)?, self.config.top_k, vocab)?;
        let restricted = softmax_rows_scaled(&gather_cols(&cos, &sel.indices), t.tau());
        Ok((sel, restricted))
    }

    /// Batch loss and its gradient for every γ tensor, in [`PromptParameters::tensors`] order.
    pub fn loss_and_gradients(
        &self,
        gamma: &PromptParameters,
        batch: &[usize],
    ) -> Result<(f64, Vec<Tensor>, Option<SelectionResult>)> {
        if gamma.method() != self.config.method {
            return Err(Error::Contract(format!(
                "prompt is {} but the trainer expects {}",
                gamma.method(),
                self.config.method
            )));
        }
        if batch.is_empty() || batch.iter().any(|&i| i >= self.samples.len()) {
            return Err(Error::Contract("batch indices out of range".into()));
        }
        let eps = self.config.distill.eps_floor;
        let tau = self.config.distill.tau_student;
        let mut selection = None;
        let mut teacher_rows = None;
        let mut labels: Option<Vec<usize>> = None;
        let class_idx: Vec<usize> = match self.config.objective {
            Objective::CaKdpl => {
                let (sel, p) = self.ca_select(batch)?;
                let idx = sel.indices.clone();
                teacher_rows = Some(p);
                selection = Some(sel);
                idx
            }
            Objective::PompStar => {
                let vl = self.vocab_labels.as_ref().unwrap();
                let batch_labels: Vec<usize> = batch.iter().map(|&i| vl[i]).collect();
                let seed = self.config.seed ^ self.steps.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let sel = pomp_star_select(
                    Some(&batch_labels),
                    self.vocabulary.as_ref().unwrap(),
                    self.config.top_k,
                    seed,
                )?;
                labels = Some(
                    batch_labels
                        .iter()
                        .map(|l| sel.indices.binary_search(l).unwrap())
                        .collect(),
                );
                let idx = sel.indices.clone();
                selection = Some(sel);
                idx
            }
            Objective::Kdpl => {
                teacher_rows = Some(gather_rows(self.teacher_probs.as_ref().unwrap(), batch));
                (0..self.classes.len()).collect()
            }
            Objective::UplStar => {
                let pl = self.pseudo_labels.as_ref().unwrap();
                labels = Some(batch.iter().map(|&i| pl[i]).collect());
                (0..self.classes.len()).collect()
            }
            Objective::Plain => {
                labels = Some(batch.iter().map(|&i| self.samples[i].label).collect());
                (0..self.classes.len()).collect()
            }
        };
        let mut g = Graph::new();
        let bound = gamma.bind(&mut g, true);
        let images: Vec<&ImageInput> = batch.iter().map(|&i| &self.samples[i].image).collect();
        let frozen = self.frozen_images.as_ref().map(|f| gather_rows(f, batch));
        let tokens: Vec<&TokenSequence> = class_idx.iter().map(|&c| &self.class_tokens[c]).collect();
        let out = student::forward(
            &mut g,
            self.student,
            Some((gamma, &bound)),
            &images,
            frozen.as_ref(),
            &tokens,
            tau,
        )?;
        let mut loss = match (&teacher_rows, &labels) {
            (Some(pt), _) => kd_loss_graph(&mut g, pt, out.logits, self.config.distill.kl_mode, eps)?,
            (None, Some(l)) => ce_loss_graph(&mut g, out.logits, l, eps)?,
            (None, None) => unreachable!(),
        };
        if let Some(a) = &self.anchors {
            let frozen_txt = gather_rows(&a.text, &class_idx);
            let frozen_img = gather_rows(&a.image, batch);
            let frozen_probs = softmax_rows_scaled(&frozen_img.matmul_t(&frozen_txt), tau);
            let text = out
                .text
                .ok_or_else(|| Error::Contract("PromptSRC needs class-level text features".into()))?;
            let fi = g.constant(frozen_img);
            let ft = g.constant(frozen_txt);
            let fp = g.constant(frozen_probs);
            let ps = g.softmax_rows(out.logits);
            let reg = regularizer_graph(
                &mut g,
                out.image,
                text,
                fi,
                ft,
                ps,
                fp,
                self.config.promptsrc.weights,
                eps,
            )?;
            loss = g.add(loss, reg)?;
        }
        let value = g.value(loss).get(0, 0);
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|&v| grads.get_or_zeros(v, g.value(v)))
            .collect();
        Ok((value, grads, selection))
    }

    /// One optimizer step on `batch` at learning rate `lr`.
    pub fn step(&mut self, gamma: &mut PromptParameters, batch: &[usize], lr: f64) -> Result<StepOutput> {
        let (loss, grads, selection) = self.loss_and_gradients(gamma, batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            let ids: Vec<&str> = batch.iter().map(|&i| self.samples[i].id.as_str()).collect();
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {}; batch {ids:?}; γ norm {}",
                self.steps,
                gamma.norm()
            )));
        }
        self.sgd.step(gamma.tensors_mut(), &grads, lr)?;
        self.steps += 1;
        Ok(StepOutput { loss, selection })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    #[serde(skip)]
    pub selections: Vec<SelectionResult>,
}

/// Batches for one epoch: a seeded shuffle, partial tail dropped unless it is the only batch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n < batch_size {
        return vec![order];
    }
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Train γ for the configured epochs; PromptSRC ends with Gaussian aggregation of epoch snapshots.
pub fn fit(trainer: &mut Trainer<'_>, gamma: &mut PromptParameters) -> Result<FitReport> {
    let cfg = trainer.config().clone();
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FitReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::new(),
        learning_rates: Vec::with_capacity(cfg.epochs),
        selections: Vec::new(),
    };
    let mut snapshots = Vec::new();
    let n = trainer.samples().len();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut sum = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, &mut rng);
        for b in &batches {
            let out = trainer.step(gamma, b, lr)?;
            sum += out.loss;
            report.step_losses.push(out.loss);
            if let Some(s) = out.selection {
                report.selections.push(s);
            }
        }
        let mean = sum / batches.len() as f64;
        log::debug!("epoch {}/{}: lr {lr:.3e}, loss {mean:.6}", epoch + 1, cfg.epochs);
        report.epoch_losses.push(mean);
        report.learning_rates.push(lr);
        if cfg.method == PromptMethod::Promptsrc {
            snapshots.push(gamma.clone());
        }
    }
    if !snapshots.is_empty() {
        *gamma = gaussian_aggregate(&snapshots, cfg.promptsrc.gauss_mean, cfg.promptsrc.gauss_std)?;
    }
    Ok(report)
}
