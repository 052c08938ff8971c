//! Frozen teacher inference with text- and image-feature reuse.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use super::cache::TeacherPredictionCache;
use crate::error::{Error, Result};
use crate::model::{probabilities_from_cosines, ClassSet, DualEncoderModel, ImageInput, ProbabilityDistribution, Role};
use crate::par;
use crate::tensor::{dot, Tensor};

pub const TEACHER_TEMPLATE: &str = "a photo of {}";

/// An image with the identifier used for caching.
pub type ImageRef<'a> = (&'a str, &'a ImageInput);

pub struct Teacher {
    model: DualEncoderModel,
    template: String,
    tau: f64,
    text_features: Mutex<HashMap<[u8; 32], Arc<Tensor>>>,
    image_features: RwLock<HashMap<String, Arc<[f64]>>>,
}

impl std::fmt::Debug for Teacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Teacher")
            .field("template", &self.template)
            .field("tau", &self.tau)
            .finish_non_exhaustive()
    }
}

fn normalized(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = crate::tensor::l2_norm(&v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("teacher produced a zero or non-finite embedding".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

impl Teacher {
    pub fn new(model: DualEncoderModel, template: &str, tau: f64) -> Result<Self> {
        if model.role() != Role::Teacher || !model.is_frozen() {
            return Err(Error::Contract("teacher model must be a frozen teacher".into()));
        }
        if template.matches("{}").count() != 1 {
            return Err(Error::Config(format!(
                "teacher template {template:?} must contain exactly one {{}}"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("teacher temperature must be positive, got {tau}")));
        }
        Ok(Self {
            model,
            template: template.to_string(),
            tau,
            text_features: Mutex::new(HashMap::new()),
            image_features: RwLock::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &DualEncoderModel {
        &self.model
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Unit-norm text features, one row per class, computed once per class set.
    pub fn text_features(&self, class_set: &ClassSet) -> Result<Arc<Tensor>> {
        let key = class_set.content_hash();
        if let Some(t) = self.text_features.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let prompts = self.model.build_handcrafted_prompts(class_set, &self.template)?;
        let rows = par::map_slice(&prompts, |p| {
            normalized(self.model.encode_text(p, None)?.0)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let t = Arc::new(Tensor::from_rows(&rows)?);
        self.text_features.lock().unwrap().insert(key, t.clone());
        Ok(t)
    }

    /// Unit-norm image features in input order; each id is encoded at most once.
    pub fn image_features(&self, images: &[ImageRef<'_>]) -> Result<Tensor> {
        let known = {
            let map = self.image_features.read().unwrap();
            images.iter().map(|(id, _)| map.get(*id).cloned()).collect::<Vec<_>>()
        };
        let fresh = par::map_range(images.len(), |i| match &known[i] {
            Some(_) => Ok(None),
            None => Ok(Some(normalized(self.model.encode_image(images[i].1, None)?.0)?)),
        })
        .into_iter()
        .collect::<Result<Vec<Option<Vec<f64>>>>>()?;
        let mut rows = Vec::with_capacity(images.len());
        let mut map = self.image_features.write().unwrap();
        for (i, f) in fresh.into_iter().enumerate() {
            let row: Arc<[f64]> = match (f, &known[i]) {
                (Some(v), _) => {
                    let a: Arc<[f64]> = Arc::from(v);
                    map.insert(images[i].0.to_string(), a.clone());
                    a
                }
                (None, Some(a)) => a.clone(),
                (None, None) => unreachable!(),
            };
            rows.push(row.to_vec());
        }
        Tensor::from_rows(&rows)
    }

    /// Cosine matrix (N × C) between images and a text-feature table.
    pub fn cosines(&self, images: &[ImageRef<'_>], text: &Tensor) -> Result<Tensor> {
        let img = self.image_features(images)?;
        Ok(img.matmul_t(text))
    }

    /// Teacher distributions over `class_set`, one per image.
    ///
    /// With a cache, hits are returned verbatim and misses are computed and
    /// appended; values never differ from a fresh pass.
    pub fn predict(
        &self,
        images: &[ImageRef<'_>],
        class_set: &ClassSet,
        cache: Option<&TeacherPredictionCache>,
    ) -> Result<Vec<ProbabilityDistribution>> {
        class_set.require_classifiable()?;
        let hash = class_set.content_hash();
        let cached: Vec<Option<Arc<[f64]>>> = match cache {
            Some(c) => images.iter().map(|(id, _)| c.get(id, &hash)).collect(),
            None => vec![None; images.len()],
        };
        let missing: Vec<usize> = (0..images.len()).filter(|&i| cached[i].is_none()).collect();
        let mut computed: HashMap<usize, Vec<f64>> = HashMap::new();
        if !missing.is_empty() {
            let text = self.text_features(class_set)?;
            let subset: Vec<ImageRef<'_>> = missing.iter().map(|&i| images[i]).collect();
            let img = self.image_features(&subset)?;
            let rows = par::map_range(subset.len(), |r| {
                let cos: Vec<f64> = (0..text.rows()).map(|c| dot(img.row(r), text.row(c))).collect();
                probabilities_from_cosines(&cos, self.tau)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            if let Some(c) = cache {
                c.insert_many(
                    missing
                        .iter()
                        .zip(&rows)
                        .map(|(&i, p)| (images[i].0.to_string(), hash, p.clone()))
                        .collect(),
                )?;
            }
            computed = missing.into_iter().zip(rows).collect();
        }
        (0..images.len())
            .map(|i| {
                let probs = match &cached[i] {
                    Some(p) => p.to_vec(),
                    None => computed.remove(&i).unwrap(),
                };
                ProbabilityDistribution::for_class_set(probs, class_set)
            })
            .collect()
    }
}

pub fn teacher_predict(
    teacher: &Teacher,
    images: &[ImageRef<'_>],
    class_set: &ClassSet,
    cache: Option<&TeacherPredictionCache>,
) -> Result<Vec<ProbabilityDistribution>> {
    teacher.predict(images, class_set, cache)
}
