//! PromptSRC self-regularization and Gaussian prompt aggregation.

use serde::{Deserialize, Serialize};

use super::PromptParameters;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, ProbabilityDistribution};

/// Generic templates whose averaged frozen text features anchor the prompted ones.
pub const TEMPLATE_BANK: [&str; 7] = [
    "a photo of a {}.",
    "a bad photo of the {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerWeights {
    pub text_l1: f64,
    pub image_l1: f64,
    pub kl: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            text_l1: 1.0,
            image_l1: 1.0,
            kl: 1.0,
        }
    }
}

fn mean_abs_gap(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("embedding dims {} and {}", a.dim(), b.dim())));
    }
    let n = a.dim().max(1) as f64;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// text_l1·|t − t̄|₁/d + image_l1·|v − v̄|₁/d + kl·KL(frozen ‖ prompted).
#[allow(clippy::too_many_arguments)]
pub fn promptsrc_regularizer(
    prompted_img: &EmbeddingVector,
    prompted_txt: &EmbeddingVector,
    frozen_img: &EmbeddingVector,
    frozen_txt: &EmbeddingVector,
    prompted_probs: &ProbabilityDistribution,
    frozen_probs: &ProbabilityDistribution,
    weights: RegularizerWeights,
    eps: f64,
) -> Result<f64> {
    frozen_probs.check_compatible(prompted_probs)?;
    let text = mean_abs_gap(prompted_txt, frozen_txt)?;
    let image = mean_abs_gap(prompted_img, frozen_img)?;
    let kl: f64 = frozen_probs
        .probs()
        .iter()
        .zip(prompted_probs.probs())
        .map(|(p, q)| p * ((p + eps) / (q + eps)).ln())
        .sum();
    Ok(weights.text_l1 * text + weights.image_l1 * image + weights.kl * kl)
}

/// Graph form for a batch: rows of `prompted_*` pair with rows of the frozen constants.
///
/// Text features are C×d (one per class), image features and probabilities N×·.
#[allow(clippy::too_many_arguments)]
pub(crate) fn regularizer_graph(
    g: &mut Graph<'_>,
    prompted_img: Var,
    prompted_txt: Var,
    frozen_img: Var,
    frozen_txt: Var,
    prompted_probs: Var,
    frozen_probs: Var,
    weights: RegularizerWeights,
    eps: f64,
) -> Result<Var> {
    let dt = g.sub(prompted_txt, frozen_txt)?;
    let dt = g.abs(dt);
    let text = g.mean_all(dt);
    let di = g.sub(prompted_img, frozen_img)?;
    let di = g.abs(di);
    let image = g.mean_all(di);
    // KL(frozen ‖ prompted) per image, then mean over images
    let q = g.add_scalar(prompted_probs, eps);
    let lq = g.ln(q);
    let fp = g.value(frozen_probs).clone();
    let lp = g.constant(fp.map(|p| (p + eps).ln()));
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(frozen_probs, diff)?;
    let per_image = g.sum_rows(terms);
    let kl = g.mean_all(per_image);
    let a = g.scale(text, weights.text_l1);
    let b = g.scale(image, weights.image_l1);
    let c = g.scale(kl, weights.kl);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// w_e ∝ exp(−(e − μ)²/(2σ²)) for epochs e = 1..=n, normalized to sum 1.
pub fn gaussian_weights(n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Contract("no snapshots to aggregate".into()));
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("aggregation std must be positive, got {std}")));
    }
    // log-space so distant epochs cannot underflow the whole vector to zero
    let logs: Vec<f64> = (1..=n)
        .map(|e| -((e as f64 - mean).powi(2)) / (2.0 * std * std))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Σ_e w_e · snapshot_e with Gaussian weights over the snapshots' epochs (1-based).
pub fn gaussian_aggregate(snapshots: &[PromptParameters], mean: f64, std: f64) -> Result<PromptParameters> {
    let weights = gaussian_weights(snapshots.len(), mean, std)?;
    if snapshots.len() == 1 {
        return Ok(snapshots[0].clone());
    }
    let mut out = snapshots[0].clone();
    let parts: Vec<&PromptParameters> = snapshots.iter().collect();
    out.set_weighted_sum(&parts, &weights)?;
    Ok(out)
}
