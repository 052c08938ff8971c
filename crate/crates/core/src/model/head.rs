//! Class sets, embeddings, and the cosine-softmax zero-shot head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::log_softmax_row;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Tensor};

/// Ordered list of unique class names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Contract(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// SHA-256 over the length-prefixed ordered names.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.names.len() as u64).to_le_bytes());
        for n in &self.names {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
        }
        h.finalize().into()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<ClassSet> {
        indices
            .iter()
            .map(|&i| {
                self.names
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("class index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()
            .and_then(ClassSet::new)
    }

    pub(crate) fn require_classifiable(&self) -> Result<()> {
        if self.names.len() < 2 {
            return Err(Error::Contract(format!(
                "classification needs at least 2 classes, got {}",
                self.names.len()
            )));
        }
        Ok(())
    }
}

/// A point in the shared image/text space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|x| x * s).collect())
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("embedding norm is {n}")));
        }
        Ok(self.scaled(1.0 / n))
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }
}

/// Class probabilities for one image, tied to the class set they cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityDistribution {
    probs: Vec<f64>,
    class_set: Option<[u8; 32]>,
}

impl ProbabilityDistribution {
    /// Validates non-negativity and normalization (±1e-6).
    pub fn new(probs: Vec<f64>, class_set: Option<[u8; 32]>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Contract("probabilities must be finite and ≥ 0".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("probabilities sum to {s}")));
        }
        Ok(Self { probs, class_set })
    }

    pub fn for_class_set(probs: Vec<f64>, class_set: &ClassSet) -> Result<Self> {
        if probs.len() != class_set.len() {
            return Err(Error::Contract(format!(
                "{} probabilities for {} classes",
                probs.len(),
                class_set.len()
            )));
        }
        Self::new(probs, Some(class_set.content_hash()))
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
            class_set: None,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn class_set_hash(&self) -> Option<[u8; 32]> {
        self.class_set
    }

    pub fn with_class_set(mut self, class_set: &ClassSet) -> Self {
        self.class_set = Some(class_set.content_hash());
        self
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Errors unless both distributions cover the same classes.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let tags_differ = matches!((self.class_set, other.class_set), (Some(a), Some(b)) if a != b);
        if self.probs.len() != other.probs.len() || tags_differ {
            return Err(Error::Contract(
                "distributions are over different class sets".into(),
            ));
        }
        Ok(())
    }
}

/// First index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Softmax of cosine similarities over temperature, evaluated in log space.
pub fn probabilities_from_cosines(cosines: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
    }
    let logits: Vec<f64> = cosines.iter().map(|c| c / temperature).collect();
    let mut logp = vec![0.0; logits.len()];
    log_softmax_row(&logits, &mut logp);
    Ok(logp.into_iter().map(f64::exp).collect())
}

/// Zero-shot class probabilities of one image against per-class text embeddings.
pub fn compute_class_probabilities(
    image_emb: &EmbeddingVector,
    text_embs: &[EmbeddingVector],
    temperature: f64,
) -> Result<ProbabilityDistribution> {
    if text_embs.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 text embeddings, got {}",
            text_embs.len()
        )));
    }
    let cosines = text_embs
        .iter()
        .map(|t| {
            if t.dim() != image_emb.dim() {
                return Err(Error::Shape(format!(
                    "text embedding dim {} vs image dim {}",
                    t.dim(),
                    image_emb.dim()
                )));
            }
            cosine(t.values(), image_emb.values())
        })
        .collect::<Result<Vec<_>>>()?;
    let probs = probabilities_from_cosines(&cosines, temperature)?;
    ProbabilityDistribution::new(probs, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the softmax with exact exponentials (no shifting).
    fn direct(cosines: &[f64], tau: f64) -> Vec<f64> {
        let e: Vec<f64> = cosines.iter().map(|c| (c / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn two_class_fixed_case() {
        let oracle = direct(&[0.2, 0.1], 0.01);
        assert!((oracle[0] - 0.999_954_6).abs() < 1e-6);
        assert!((oracle[1] - 0.000_045_4).abs() < 1e-6);
        let p = probabilities_from_cosines(&[0.2, 0.1], 0.01).unwrap();
        for (a, b) in p.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_cosines_give_uniform() {
        let p = probabilities_from_cosines(&[0.3; 5], 0.01).unwrap();
        assert!(p.iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let img = EmbeddingVector(vec![0.0, 0.0]);
        let t = vec![EmbeddingVector(vec![1.0, 0.0]), EmbeddingVector(vec![0.0, 1.0])];
        assert!(matches!(
            compute_class_probabilities(&img, &t, 0.01),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn duplicate_class_names_rejected() {
        assert!(ClassSet::new(["a", "b", "a"]).is_err());
    }

    proptest! {
        #[test]
        fn extreme_cosines_stay_finite(c in proptest::collection::vec(-1.0f64..=1.0, 2..64)) {
            let p = probabilities_from_cosines(&c, 0.01).unwrap();
            prop_assert!(p.iter().all(|x| x.is_finite()));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
