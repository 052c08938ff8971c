//! Per-batch class selection from a large vocabulary.
//!
//! The teacher scores every vocabulary name for every image in the batch, the
//! batch mean is taken, and the K most probable names become the class set for
//! that step. Teacher and student then each run a fresh softmax over the K
//! selected cosines.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::teacher::{ImageRef, Teacher};
use crate::distill::{StepOutput, Trainer};
use crate::error::{Error, Result};
use crate::model::ClassSet;
use crate::prompt::PromptParameters;
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 1000;

/// Ordered, normalized, duplicate-free class names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    classes: ClassSet,
}

fn normalize_name(raw: &str) -> String {
    raw.trim().to_lowercase()
}

impl ClassVocabulary {
    /// Lowercase and trim every name; later duplicates are dropped.
    pub fn new<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        for n in names {
            let n = normalize_name(n.as_ref());
            if !n.is_empty() && seen.insert(n.clone()) {
                kept.push(n);
            }
        }
        if kept.is_empty() {
            return Err(Error::Contract("vocabulary is empty".into()));
        }
        Ok(Self {
            classes: ClassSet::new(kept)?,
        })
    }

    /// One name per line; lines starting with `#` are comments.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let v = Self::new(
            text.lines()
                .filter(|l| !l.trim_start().starts_with('#')),
        )?;
        log::info!("{}: {} class names after normalization", path.display(), v.len());
        Ok(v)
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.classes
    }

    pub fn names(&self) -> &[String] {
        self.classes.names()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let n = normalize_name(name);
        self.names().iter().position(|x| *x == n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Ascending vocabulary indices.
    pub indices: Vec<usize>,
    pub names: Vec<String>,
    /// P̄_T at the selected indices (empty for label-driven selections).
    pub mean_probs: Vec<f64>,
}

/// Teacher distributions over the whole vocabulary, N × C.
pub fn stack_teacher_probs(teacher: &Teacher, images: &[ImageRef<'_>], vocab: &ClassVocabulary) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Contract("empty image batch".into()));
    }
    let text = teacher.text_features(vocab.class_set())?;
    let cos = teacher.cosines(images, &text)?;
    Ok(softmax_rows_scaled(&cos, teacher.tau()))
}

/// Row-wise softmax of `cos / tau`.
pub(crate) fn softmax_rows_scaled(cos: &Tensor, tau: f64) -> Tensor {
    let mut out = cos.map(|c| c / tau);
    for r in 0..out.rows() {
        let row = out.row(r).to_vec();
        crate::autograd::softmax_row(&row, out.row_mut(r));
    }
    out
}

/// Column means of P_T.
pub fn mean_over_batch(p: &Tensor) -> Result<Vec<f64>> {
    if p.rows() == 0 {
        return Err(Error::Contract("mean over an empty batch".into()));
    }
    Ok(p.mean_rows().into_vec())
}

/// Indices of the `min(k, C)` largest entries, ties to the lower index, returned ascending.
pub fn select_topk_indices(mean: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    let k = k.min(mean.len());
    let mut idx: Vec<usize> = (0..mean.len()).collect();
    let order = |a: &usize, b: &usize| mean[*b].total_cmp(&mean[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

pub fn select_topk(mean: &[f64], k: usize, vocab: &ClassVocabulary) -> Result<SelectionResult> {
    if mean.len() != vocab.len() {
        return Err(Error::Contract(format!(
            "{} mean probabilities for a {}-name vocabulary",
            mean.len(),
            vocab.len()
        )));
    }
    if k > vocab.len() {
        log::warn!("K = {k} exceeds vocabulary size {}; clamping", vocab.len());
    }
    let indices = select_topk_indices(mean, k)?;
    Ok(SelectionResult {
        names: indices.iter().map(|&i| vocab.names()[i].clone()).collect(),
        mean_probs: indices.iter().map(|&i| mean[i]).collect(),
        indices,
    })
}

/// The batch's true classes plus distinct uniformly drawn others, up to `min(k, C)`.
pub fn pomp_star_select(
    batch_labels: Option<&[usize]>,
    vocab: &ClassVocabulary,
    k: usize,
    seed: u64,
) -> Result<SelectionResult> {
    let labels = batch_labels
        .ok_or_else(|| Error::Contract("POMP* selection needs ground-truth labels".into()))?;
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    let c = vocab.len();
    let mut chosen: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for &l in labels {
        if l >= c {
            return Err(Error::Contract(format!("label {l} outside the {c}-name vocabulary")));
        }
        if seen.insert(l) {
            chosen.push(l);
        }
    }
    let target = k.min(c).max(chosen.len());
    let need = target - chosen.len();
    if need > 0 {
        let pool: Vec<usize> = (0..c).filter(|i| !seen.contains(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for j in sample(&mut rng, pool.len(), need) {
            chosen.push(pool[j]);
        }
    }
    chosen.sort_unstable();
    Ok(SelectionResult {
        names: chosen.iter().map(|&i| vocab.names()[i].clone()).collect(),
        indices: chosen,
        mean_probs: Vec::new(),
    })
}

/// One class-agnostic step on the batch `batch` (indices into the trainer's samples).
pub fn ca_train_step(
    trainer: &mut Trainer<'_>,
    gamma: &mut PromptParameters,
    batch: &[usize],
    lr: f64,
) -> Result<(f64, SelectionResult)> {
    let StepOutput { loss, selection } = trainer.step(gamma, batch, lr)?;
    let selection = selection
        .ok_or_else(|| Error::Contract("trainer is not configured for class-agnostic training".into()))?;
    Ok((loss, selection))
}
