//! Teacher→student distillation: KL objectives, teacher inference and caching,
//! and the prompt-only training loop.

pub mod cache;
pub mod student;
pub mod teacher;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ProbabilityDistribution;
use crate::tensor::Tensor;

pub use cache::{CacheStats, TeacherPredictionCache};
pub use student::{student_predict, StudentForward};
pub use teacher::{Teacher, TEACHER_TEMPLATE};
pub use train::{
    fit, FitReport, LrSchedule, Objective, Sgd, StepOutput, TrainConfig, Trainer,
};

pub const DEFAULT_EPS: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// KL(teacher ‖ student).
    Forward,
    /// KL(student ‖ teacher).
    Reverse,
    #[default]
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    pub kl_mode: KlMode,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub eps_floor: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            kl_mode: KlMode::Symmetric,
            tau_student: DEFAULT_TAU,
            tau_teacher: DEFAULT_TAU,
            eps_floor: DEFAULT_EPS,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_student", self.tau_student),
            ("tau_teacher", self.tau_teacher),
            ("eps_floor", self.eps_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn kl_slices(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * ((pi + eps) / (qi + eps)).ln())
        .sum()
}

/// Σ p_i ln((p_i + ε)/(q_i + ε)).
pub fn kl_divergence(p: &ProbabilityDistribution, q: &ProbabilityDistribution, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("ε must be positive, got {eps}")));
    }
    p.check_compatible(q)?;
    Ok(kl_slices(p.probs(), q.probs(), eps))
}

pub fn kdpl_loss(
    teacher: &ProbabilityDistribution,
    student: &ProbabilityDistribution,
    mode: KlMode,
    eps: f64,
) -> Result<f64> {
    Ok(match mode {
        KlMode::Forward => kl_divergence(teacher, student, eps)?,
        KlMode::Reverse => kl_divergence(student, teacher, eps)?,
        KlMode::Symmetric => kl_divergence(teacher, student, eps)? + kl_divergence(student, teacher, eps)?,
    })
}

/// −ln(p_S[label] + ε) against a teacher pseudo-label.
pub fn upl_star_loss(student: &ProbabilityDistribution, pseudo_label: usize, eps: f64) -> Result<f64> {
    let p = student.probs().get(pseudo_label).ok_or_else(|| {
        Error::Contract(format!(
            "pseudo-label {pseudo_label} outside {} classes",
            student.len()
        ))
    })?;
    Ok(-(p + eps).ln())
}

/// Batch-mean KL between constant teacher rows `p_t` and the softmax of `logits`.
pub(crate) fn kd_loss_graph(
    g: &mut Graph<'_>,
    p_t: &Tensor,
    logits: Var,
    mode: KlMode,
    eps: f64,
) -> Result<Var> {
    if g.value(logits).shape() != p_t.shape() {
        return Err(Error::Contract(format!(
            "teacher distributions {:?} vs student logits {:?}",
            p_t.shape(),
            g.value(logits).shape()
        )));
    }
    let ps = g.softmax_rows(logits);
    let shifted = g.add_scalar(ps, eps);
    let log_ps = g.ln(shifted);
    let log_pt = g.constant(p_t.map(|p| (p + eps).ln()));
    let pt = g.constant(p_t.clone());
    let mut terms = Vec::with_capacity(2);
    if matches!(mode, KlMode::Forward | KlMode::Symmetric) {
        let d = g.sub(log_pt, log_ps)?;
        terms.push(g.mul(pt, d)?);
    }
    if matches!(mode, KlMode::Reverse | KlMode::Symmetric) {
        let d = g.sub(log_ps, log_pt)?;
        terms.push(g.mul(ps, d)?);
    }
    let mut total = terms[0];
    if terms.len() == 2 {
        total = g.add(terms[0], terms[1])?;
    }
    let per_image = g.sum_rows(total);
    Ok(g.mean_all(per_image))
}

/// Batch-mean −ln(p_S[label] + ε).
pub(crate) fn ce_loss_graph(g: &mut Graph<'_>, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (n, c) = g.value(logits).shape();
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(n, c);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Contract(format!("label {l} outside {c} classes")));
        }
        onehot.set(i, l, 1.0);
    }
    let ps = g.softmax_rows(logits);
    let shifted = g.add_scalar(ps, eps);
    let log_ps = g.ln(shifted);
    let mask = g.constant(onehot);
    let picked = g.mul(mask, log_ps)?;
    let per_image = g.sum_rows(picked);
    let mean = g.mean_all(per_image);
    Ok(g.scale(mean, -1.0))
}
