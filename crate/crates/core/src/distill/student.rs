//! Student forward pass: prompted encoders into the cosine-softmax head.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{
    probabilities_from_cosines, ClassSet, DualEncoderModel, ImageInput, ProbabilityDistribution,
    TokenSequence,
};
use crate::par;
use crate::prompt::{BoundPrompt, PromptMethod, PromptParameters};
use crate::tensor::{dot, Tensor};

/// Hand-crafted student prompt used for zero-shot baselines.
pub const STUDENT_TEMPLATE: &str = "a photo of a {}";

/// Graph handles produced by [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct StudentForward {
    /// Cosines divided by τ, N × C.
    pub logits: Var,
    /// Unit-norm image features, N × d.
    pub image: Var,
    /// Unit-norm class text features, C × d; absent for image-conditioned prompts.
    pub text: Option<Var>,
}

/// Per-class token sequences that the prompt is combined with.
///
/// With a prompt these are the words left after the learned contexts; without
/// one they are the full hand-crafted prompt.
pub fn class_token_sequences(
    model: &DualEncoderModel,
    prompt: Option<&PromptParameters>,
    names: &[String],
) -> Result<Vec<TokenSequence>> {
    names
        .iter()
        .map(|n| match prompt {
            Some(p) => model.embed_text(&p.class_suffix_text(n)),
            None => model.embed_text(&STUDENT_TEMPLATE.replace("{}", n)),
        })
        .collect()
}

fn check_backbone(model: &DualEncoderModel, prompt: Option<&PromptParameters>) -> Result<()> {
    if let Some(p) = prompt {
        if p.method().needs_vit() && !model.has_vit() {
            return Err(Error::UnsupportedBackbone(format!(
                "{} needs a ViT student",
                p.method()
            )));
        }
    }
    Ok(())
}

fn class_text<'a>(
    g: &mut Graph<'a>,
    model: &'a DualEncoderModel,
    prompt: Option<(&'a PromptParameters, &BoundPrompt)>,
    tokens: &'a TokenSequence,
    image_feature: Option<Var>,
) -> Result<Var> {
    let t = g.weight(tokens.embeddings());
    match prompt {
        Some((p, bound)) => {
            let (seq, hook) = p.text_input_graph(g, bound, t, image_feature)?;
            model.text_graph(g, seq, hook.as_ref())
        }
        None => model.text_graph(g, t, None),
    }
}

/// Student logits for a batch of images over the classes in `class_tokens`.
///
/// `frozen_images` (N × d, unit rows) may stand in for the image encoder when the
/// prompt places nothing in it.
pub fn forward<'a>(
    g: &mut Graph<'a>,
    model: &'a DualEncoderModel,
    prompt: Option<(&'a PromptParameters, &BoundPrompt)>,
    images: &[&'a ImageInput],
    frozen_images: Option<&Tensor>,
    class_tokens: &[&'a TokenSequence],
    tau: f64,
) -> Result<StudentForward> {
    check_backbone(model, prompt.map(|(p, _)| p))?;
    if images.is_empty() || class_tokens.is_empty() {
        return Err(Error::Contract("empty batch or class list".into()));
    }
    let hook = match prompt {
        Some((p, b)) => p.visual_hook_graph(g, b)?,
        None => None,
    };
    let image = match (&hook, frozen_images) {
        (None, Some(f)) => {
            if f.rows() != images.len() {
                return Err(Error::Shape(format!(
                    "{} frozen features for {} images",
                    f.rows(),
                    images.len()
                )));
            }
            g.constant(f.clone())
        }
        _ => {
            let rows = images
                .iter()
                .map(|img| model.image_graph(g, img, hook.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let all = g.concat_rows(&rows)?;
            g.l2_normalize_rows(all)?
        }
    };
    let cocoop = prompt.is_some_and(|(p, _)| p.method() == PromptMethod::Cocoop);
    let (cos, text) = if cocoop {
        let mut rows = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            let img_i = g.slice_rows(image, i, i + 1)?;
            let feats = class_tokens
                .iter()
                .map(|t| class_text(g, model, prompt, t, Some(img_i)))
                .collect::<Result<Vec<_>>>()?;
            let txt = g.concat_rows(&feats)?;
            let txt = g.l2_normalize_rows(txt)?;
            rows.push(g.matmul_t(img_i, txt)?);
        }
        (g.concat_rows(&rows)?, None)
    } else {
        let feats = class_tokens
            .iter()
            .map(|t| class_text(g, model, prompt, t, None))
            .collect::<Result<Vec<_>>>()?;
        let txt = g.concat_rows(&feats)?;
        let txt = g.l2_normalize_rows(txt)?;
        (g.matmul_t(image, txt)?, Some(txt))
    };
    let logits = g.scale(cos, 1.0 / tau);
    Ok(StudentForward {
        logits,
        image,
        text,
    })
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = crate::tensor::l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("student produced a zero or non-finite embedding".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Unit-norm class text features (C × d) for prompts that do not look at the image.
pub fn text_features(
    model: &DualEncoderModel,
    prompt: Option<&PromptParameters>,
    class_tokens: &[TokenSequence],
) -> Result<Tensor> {
    let rows = par::map_slice(class_tokens, |tokens| {
        let mut g = Graph::new();
        let bound = prompt.map(|p| p.bind(&mut g, false));
        let pb = prompt.zip(bound.as_ref());
        let v = class_text(&mut g, model, pb, tokens, None)?;
        unit(g.value(v).row(0))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Unit-norm image features, one per image, with the prompt's visual tokens if any.
pub fn image_features(
    model: &DualEncoderModel,
    prompt: Option<&PromptParameters>,
    images: &[&ImageInput],
) -> Result<Tensor> {
    check_backbone(model, prompt)?;
    let rows = par::map_slice(images, |img| {
        let mut g = Graph::new();
        let hook = match prompt {
            Some(p) => {
                let b = p.bind(&mut g, false);
                p.visual_hook_graph(&mut g, &b)?
            }
            None => None,
        };
        let v = model.image_graph(&mut g, img, hook.as_ref())?;
        unit(g.value(v).row(0))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Student distributions over `class_set`, one per image.
///
/// Without a prompt the hand-crafted template is used.
pub fn student_predict(
    model: &DualEncoderModel,
    prompt: Option<&PromptParameters>,
    images: &[&ImageInput],
    class_set: &ClassSet,
    tau: f64,
) -> Result<Vec<ProbabilityDistribution>> {
    class_set.require_classifiable()?;
    check_backbone(model, prompt)?;
    let tokens = class_token_sequences(model, prompt, class_set.names())?;
    let rows: Vec<Vec<f64>> = if prompt.is_some_and(|p| p.method() == PromptMethod::Cocoop) {
        let token_refs: Vec<&TokenSequence> = tokens.iter().collect();
        par::map_slice(images, |img| {
            let mut g = Graph::new();
            let p = prompt.unwrap();
            let b = p.bind(&mut g, false);
            let out = forward(&mut g, model, Some((p, &b)), &[img], None, &token_refs, tau)?;
            let cos: Vec<f64> = g.value(out.logits).row(0).iter().map(|z| z * tau).collect();
            probabilities_from_cosines(&cos, tau)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
    } else {
        let text = text_features(model, prompt, &tokens)?;
        let img = image_features(model, prompt, images)?;
        par::map_range(images.len(), |i| {
            let cos: Vec<f64> = (0..text.rows()).map(|c| dot(img.row(i), text.row(c))).collect();
            probabilities_from_cosines(&cos, tau)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
    };
    rows.into_iter()
        .map(|p| ProbabilityDistribution::for_class_set(p, class_set))
        .collect()
}
