//! Learnable prompt parameters γ and how they enter the student encoders.
//!
//! Five families are supported: text contexts (CoOp), image-conditioned text
//! contexts (CoCoOp), visual tokens (VPT shallow/deep), coupled text→visual deep
//! prompts (MaPLe), and independent deep multimodal prompts with self-regularization
//! (PromptSRC). γ is the only trainable state anywhere in the system.

pub mod promptsrc;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::{DualEncoderModel, TextHook, TokenSequence, Tokenizer, VisualHook};
use crate::tensor::Tensor;

pub use promptsrc::{gaussian_aggregate, gaussian_weights, promptsrc_regularizer, RegularizerWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum PromptMethod {
    Coop,
    Cocoop,
    VptShallow,
    VptDeep,
    Maple,
    Promptsrc,
}

impl PromptMethod {
    pub const ALL: [PromptMethod; 6] = [
        PromptMethod::Coop,
        PromptMethod::Cocoop,
        PromptMethod::VptShallow,
        PromptMethod::VptDeep,
        PromptMethod::Maple,
        PromptMethod::Promptsrc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMethod::Coop => "coop",
            PromptMethod::Cocoop => "cocoop",
            PromptMethod::VptShallow => "vpt_shallow",
            PromptMethod::VptDeep => "vpt_deep",
            PromptMethod::Maple => "maple",
            PromptMethod::Promptsrc => "promptsrc",
        }
    }

    /// Methods that place tokens into the image encoder need a ViT.
    pub fn needs_vit(self) -> bool {
        matches!(
            self,
            PromptMethod::VptShallow | PromptMethod::VptDeep | PromptMethod::Maple | PromptMethod::Promptsrc
        )
    }

    pub fn has_text_context(self) -> bool {
        !matches!(self, PromptMethod::VptShallow | PromptMethod::VptDeep)
    }
}

impl fmt::Display for PromptMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    PerLayer,
    Shared,
}

/// Shape and initialization options for a prompt learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptOptions {
    /// Text context tokens M.
    pub n_ctx: usize,
    /// Visual tokens P.
    pub n_visual: usize,
    /// Layers receiving prompts (clamped to the encoder depth).
    pub depth: usize,
    /// Words whose embeddings seed the contexts; also the hand-crafted prefix.
    pub init_text: String,
    pub coupling: CouplingMode,
    pub init_std: f64,
}

impl PromptOptions {
    /// Per-method defaults for token counts and depths.
    pub fn for_method(method: PromptMethod) -> Self {
        let (n_ctx, n_visual, depth) = match method {
            PromptMethod::Coop | PromptMethod::Cocoop => (4, 0, 1),
            PromptMethod::VptShallow => (0, 8, 1),
            PromptMethod::VptDeep => (0, 8, 12),
            PromptMethod::Maple => (2, 2, 9),
            PromptMethod::Promptsrc => (4, 4, 9),
        };
        Self {
            n_ctx,
            n_visual,
            depth,
            init_text: "a photo of a".into(),
            coupling: CouplingMode::PerLayer,
            init_std: 0.02,
        }
    }
}

/// CoOp contexts v_1..v_M.
#[derive(Clone, Debug, PartialEq)]
pub struct TextContextPrompt {
    pub contexts: Tensor,
}

/// CoCoOp: contexts shifted by π = h(image feature).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalContextPrompt {
    pub contexts: Tensor,
    pub meta_w1: Tensor,
    pub meta_b1: Tensor,
    pub meta_w2: Tensor,
    pub meta_b2: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualDepth {
    Shallow,
    Deep,
}

/// VPT tokens, one P×d_v set per injected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrompt {
    pub depth: VisualDepth,
    pub tokens: Vec<Tensor>,
}

/// MaPLe: per-layer text contexts; visual tokens are F(text) and never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct MaplePrompt {
    pub text_layers: Vec<Tensor>,
    /// (weight d_w×d_v, bias 1×d_v); one per layer or a single shared map.
    pub couplings: Vec<(Tensor, Tensor)>,
}

/// PromptSRC: independent deep text and visual prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSrcPrompt {
    pub text_layers: Vec<Tensor>,
    pub visual_layers: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptKind {
    Coop(TextContextPrompt),
    Cocoop(ConditionalContextPrompt),
    Vpt(VisualPrompt),
    Maple(MaplePrompt),
    Promptsrc(PromptSrcPrompt),
}

/// γ: a prompt learner's parameters plus how they were initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParameters {
    kind: PromptKind,
    options: PromptOptions,
    /// Template words not replaced by contexts, placed before each class name.
    prefix_words: Vec<String>,
}

/// γ as graph leaves, in [`PromptParameters::tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundPrompt {
    vars: Vec<Var>,
}

impl BoundPrompt {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl PromptParameters {
    /// Fresh γ for `method` sized to `model`.
    ///
    /// When the init text has at least `n_ctx` words the contexts copy their
    /// embeddings, so the untrained prompt reproduces the hand-crafted one.
    pub fn init<R: Rng + ?Sized>(
        method: PromptMethod,
        model: &DualEncoderModel,
        options: PromptOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if method.needs_vit() && !model.has_vit() {
            return Err(Error::UnsupportedBackbone(format!(
                "{method} needs a ViT image encoder"
            )));
        }
        let cfg = model.config();
        let (d_w, d_v, d) = (cfg.text_token_dim, cfg.patch_dim, cfg.shared_dim);
        let layers = options.depth.clamp(1, cfg.num_layers);
        let words = Tokenizer::words(&options.init_text);
        let n_ctx = options.n_ctx;
        if method.has_text_context() && n_ctx == 0 {
            return Err(Error::Config(format!("{method} needs at least one text context")));
        }
        if method.needs_vit() && options.n_visual == 0 && method != PromptMethod::Maple {
            return Err(Error::Config(format!("{method} needs at least one visual token")));
        }
        let first_ctx = |rng: &mut R| -> Result<Tensor> {
            if n_ctx <= words.len() {
                let ids: Vec<u32> = words[..n_ctx]
                    .iter()
                    .map(|w| model.tokenizer().word_id(w))
                    .collect();
                Ok(model.embed_ids(&ids)?.embeddings().clone())
            } else {
                Ok(Tensor::randn(n_ctx, d_w, options.init_std, rng))
            }
        };
        let prefix_words = if method.has_text_context() {
            words.iter().skip(n_ctx).cloned().collect()
        } else {
            words.clone()
        };
        let deep_text = |rng: &mut R, first: Tensor| -> Vec<Tensor> {
            let mut v = vec![first];
            for _ in 1..layers {
                v.push(Tensor::randn(n_ctx, d_w, options.init_std, rng));
            }
            v
        };
        let kind = match method {
            PromptMethod::Coop => PromptKind::Coop(TextContextPrompt {
                contexts: first_ctx(rng)?,
            }),
            PromptMethod::Cocoop => {
                let hidden = (d / 16).max(1);
                PromptKind::Cocoop(ConditionalContextPrompt {
                    contexts: first_ctx(rng)?,
                    meta_w1: Tensor::randn(d, hidden, 1.0 / (d as f64).sqrt(), rng),
                    meta_b1: Tensor::zeros(1, hidden),
                    meta_w2: Tensor::zeros(hidden, d_w),
                    meta_b2: Tensor::zeros(1, d_w),
                })
            }
            PromptMethod::VptShallow | PromptMethod::VptDeep => {
                let (depth, count) = if method == PromptMethod::VptShallow {
                    (VisualDepth::Shallow, 1)
                } else {
                    (VisualDepth::Deep, layers)
                };
                PromptKind::Vpt(VisualPrompt {
                    depth,
                    tokens: (0..count)
                        .map(|_| Tensor::randn(options.n_visual, d_v, options.init_std, rng))
                        .collect(),
                })
            }
            PromptMethod::Maple => {
                let first = first_ctx(rng)?;
                let text_layers = deep_text(rng, first);
                let maps = match options.coupling {
                    CouplingMode::PerLayer => layers,
                    CouplingMode::Shared => 1,
                };
                let couplings = (0..maps)
                    .map(|_| {
                        (
                            Tensor::randn(d_w, d_v, 1.0 / (d_w as f64).sqrt(), rng),
                            Tensor::zeros(1, d_v),
                        )
                    })
                    .collect();
                PromptKind::Maple(MaplePrompt {
                    text_layers,
                    couplings,
                })
            }
            PromptMethod::Promptsrc => {
                let first = first_ctx(rng)?;
                let text_layers = deep_text(rng, first);
                let visual_layers = (0..layers)
                    .map(|_| Tensor::randn(options.n_visual, d_v, options.init_std, rng))
                    .collect();
                PromptKind::Promptsrc(PromptSrcPrompt {
                    text_layers,
                    visual_layers,
                })
            }
        };
        Ok(Self {
            kind,
            options,
            prefix_words,
        })
    }

    pub fn method(&self) -> PromptMethod {
        match &self.kind {
            PromptKind::Coop(_) => PromptMethod::Coop,
            PromptKind::Cocoop(_) => PromptMethod::Cocoop,
            PromptKind::Vpt(v) if v.depth == VisualDepth::Shallow => PromptMethod::VptShallow,
            PromptKind::Vpt(_) => PromptMethod::VptDeep,
            PromptKind::Maple(_) => PromptMethod::Maple,
            PromptKind::Promptsrc(_) => PromptMethod::Promptsrc,
        }
    }

    pub fn kind(&self) -> &PromptKind {
        &self.kind
    }

    pub fn kind_mut(&mut self) -> &mut PromptKind {
        &mut self.kind
    }

    pub fn options(&self) -> &PromptOptions {
        &self.options
    }

    /// Hand-crafted words that stay in front of each class name.
    pub fn prefix_words(&self) -> &[String] {
        &self.prefix_words
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.kind {
            PromptKind::Coop(p) => out.push(("ctx".to_string(), &p.contexts)),
            PromptKind::Cocoop(p) => {
                out.push(("ctx".to_string(), &p.contexts));
                out.push(("meta.w1".to_string(), &p.meta_w1));
                out.push(("meta.b1".to_string(), &p.meta_b1));
                out.push(("meta.w2".to_string(), &p.meta_w2));
                out.push(("meta.b2".to_string(), &p.meta_b2));
            }
            PromptKind::Vpt(p) => {
                for (l, t) in p.tokens.iter().enumerate() {
                    out.push((format!("visual.{l}"), t));
                }
            }
            PromptKind::Maple(p) => {
                for (l, t) in p.text_layers.iter().enumerate() {
                    out.push((format!("text.{l}"), t));
                }
                for (l, (w, b)) in p.couplings.iter().enumerate() {
                    out.push((format!("coupling.{l}.weight"), w));
                    out.push((format!("coupling.{l}.bias"), b));
                }
            }
            PromptKind::Promptsrc(p) => {
                for (l, t) in p.text_layers.iter().enumerate() {
                    out.push((format!("text.{l}"), t));
                }
                for (l, t) in p.visual_layers.iter().enumerate() {
                    out.push((format!("visual.{l}"), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.kind {
            PromptKind::Coop(p) => vec![&mut p.contexts],
            PromptKind::Cocoop(p) => vec![
                &mut p.contexts,
                &mut p.meta_w1,
                &mut p.meta_b1,
                &mut p.meta_w2,
                &mut p.meta_b2,
            ],
            PromptKind::Vpt(p) => p.tokens.iter_mut().collect(),
            PromptKind::Maple(p) => {
                let mut v: Vec<&mut Tensor> = p.text_layers.iter_mut().collect();
                for (w, b) in &mut p.couplings {
                    v.push(w);
                    v.push(b);
                }
                v
            }
            PromptKind::Promptsrc(p) => p
                .text_layers
                .iter_mut()
                .chain(p.visual_layers.iter_mut())
                .collect(),
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Squared L2 norm over every entry of γ, square-rooted.
    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Place γ on a graph: trainable leaves, or constants for inference.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> BoundPrompt {
        let vars = self
            .tensors()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.weight(t) })
            .collect();
        BoundPrompt { vars }
    }

    /// Token ids for the part of each class prompt that γ does not supply.
    pub fn class_suffix_text(&self, class_name: &str) -> String {
        let mut s = self.prefix_words.join(" ");
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(class_name);
        s
    }

    /// Prompted text input for one class on a graph.
    ///
    /// `image_feature` (1×d, normalized) is required for CoCoOp and ignored otherwise.
    pub fn text_input_graph(
        &self,
        g: &mut Graph<'_>,
        bound: &BoundPrompt,
        class_tokens: Var,
        image_feature: Option<Var>,
    ) -> Result<(Var, Option<TextHook<Var>>)> {
        let v = &bound.vars;
        match &self.kind {
            PromptKind::Coop(_) => Ok((g.concat_rows(&[v[0], class_tokens])?, None)),
            PromptKind::Cocoop(_) => {
                let img = image_feature.ok_or_else(|| {
                    Error::Contract("CoCoOp needs the image embedding to build its prompt".into())
                })?;
                let pi = meta_net(g, img, v[1], v[2], v[3], v[4])?;
                let ctx = g.add_row(v[0], pi)?;
                Ok((g.concat_rows(&[ctx, class_tokens])?, None))
            }
            PromptKind::Vpt(_) => Ok((class_tokens, None)),
            PromptKind::Maple(p) => {
                let n = p.text_layers.len();
                let seq = g.concat_rows(&[v[0], class_tokens])?;
                Ok((
                    seq,
                    Some(TextHook {
                        start: 0,
                        layers: v[1..n].to_vec(),
                    }),
                ))
            }
            PromptKind::Promptsrc(p) => {
                let n = p.text_layers.len();
                let seq = g.concat_rows(&[v[0], class_tokens])?;
                Ok((
                    seq,
                    Some(TextHook {
                        start: 0,
                        layers: v[1..n].to_vec(),
                    }),
                ))
            }
        }
    }

    /// Per-layer visual tokens on a graph; `None` for text-only methods.
    pub fn visual_hook_graph(
        &self,
        g: &mut Graph<'_>,
        bound: &BoundPrompt,
    ) -> Result<Option<VisualHook<Var>>> {
        let v = &bound.vars;
        match &self.kind {
            PromptKind::Coop(_) | PromptKind::Cocoop(_) => Ok(None),
            PromptKind::Vpt(_) => Ok(Some(VisualHook { layers: v.clone() })),
            PromptKind::Maple(p) => {
                let n = p.text_layers.len();
                let mut layers = Vec::with_capacity(n);
                for l in 0..n {
                    let c = if p.couplings.len() == 1 { 0 } else { l };
                    let (w, b) = (v[n + 2 * c], v[n + 2 * c + 1]);
                    let mapped = g.matmul(v[l], w)?;
                    layers.push(g.add_row(mapped, b)?);
                }
                Ok(Some(VisualHook { layers }))
            }
            PromptKind::Promptsrc(p) => {
                let n = p.text_layers.len();
                Ok(Some(VisualHook {
                    layers: v[n..].to_vec(),
                }))
            }
        }
    }

    /// Contexts prepended to the class tokens (eager).
    pub fn build_prompted_text_input(
        &self,
        class_tokens: &TokenSequence,
        image_emb: Option<&crate::model::EmbeddingVector>,
    ) -> Result<(TokenSequence, Option<TextHook<Tensor>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let tokens = g.weight(class_tokens.embeddings());
        let img = match image_emb {
            Some(e) => Some(g.constant(e.normalized()?.as_row())),
            None => None,
        };
        let (seq, hook) = self.text_input_graph(&mut g, &bound, tokens, img)?;
        let hook = hook.map(|h| TextHook {
            start: h.start,
            layers: h.layers.iter().map(|&v| g.value(v).clone()).collect(),
        });
        Ok((TokenSequence::new(g.value(seq).clone()), hook))
    }

    /// Per-layer visual token lists (eager).
    pub fn build_visual_injection_plan(&self) -> Result<VisualHook<Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        match self.visual_hook_graph(&mut g, &bound)? {
            Some(h) => Ok(VisualHook {
                layers: h.layers.iter().map(|&v| g.value(v).clone()).collect(),
            }),
            None => Err(Error::UnsupportedBackbone(format!(
                "{} has no visual prompt tokens",
                self.method()
            ))),
        }
    }

    /// The image-conditioned shift π; zero until the meta-net's last layer moves.
    pub fn cocoop_shift(&self, image_emb: &crate::model::EmbeddingVector) -> Result<Tensor> {
        let PromptKind::Cocoop(_) = &self.kind else {
            return Err(Error::Contract("only CoCoOp has a meta-net".into()));
        };
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let img = g.constant(image_emb.normalized()?.as_row());
        let v = &bound.vars;
        let pi = meta_net(&mut g, img, v[1], v[2], v[3], v[4])?;
        Ok(g.value(pi).clone())
    }

    /// Replace every tensor with a weighted sum of the corresponding tensors of `parts`.
    pub(crate) fn set_weighted_sum(&mut self, parts: &[&PromptParameters], weights: &[f64]) -> Result<()> {
        let n = self.tensors().len();
        for p in parts {
            if p.method() != self.method() || p.tensors().len() != n {
                return Err(Error::Contract("snapshots disagree on prompt layout".into()));
            }
        }
        let sources: Vec<Vec<Tensor>> = parts
            .iter()
            .map(|p| p.tensors().into_iter().map(|(_, t)| t.clone()).collect())
            .collect();
        for (i, t) in self.tensors_mut().into_iter().enumerate() {
            let mut acc = Tensor::zeros(t.rows(), t.cols());
            for (src, &w) in sources.iter().zip(weights) {
                if src[i].shape() != acc.shape() {
                    return Err(Error::Contract("snapshots disagree on tensor shapes".into()));
                }
                acc.axpy(w, &src[i]);
            }
            *t = acc;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), PROMPT_FORMAT.into());
        meta.insert("method".into(), self.method().as_str().into());
        meta.insert("init".into(), serde_json::to_string(&self.options)?);
        meta.insert("prefix_words".into(), serde_json::to_string(&self.prefix_words)?);
        write_container(&self.tensors(), meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut tensors, meta) = read_container(bytes)?;
        if meta.get("format").map(String::as_str) != Some(PROMPT_FORMAT) {
            return Err(Error::Serialization("not a prompt checkpoint".into()));
        }
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Serialization(format!("prompt checkpoint lacks {k}")))
        };
        let method: PromptMethod = field("method")?.parse()?;
        let options: PromptOptions = serde_json::from_str(field("init")?)?;
        let prefix_words: Vec<String> = serde_json::from_str(field("prefix_words")?)?;
        let mut take = |n: &str| {
            tensors
                .remove(n)
                .ok_or_else(|| Error::Serialization(format!("missing prompt tensor {n}")))
        };
        let layered = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| {
            let mut v = Vec::new();
            while let Ok(t) = take(&format!("{prefix}.{}", v.len())) {
                v.push(t);
            }
            v
        };
        let kind = match method {
            PromptMethod::Coop => PromptKind::Coop(TextContextPrompt {
                contexts: take("ctx")?,
            }),
            PromptMethod::Cocoop => PromptKind::Cocoop(ConditionalContextPrompt {
                contexts: take("ctx")?,
                meta_w1: take("meta.w1")?,
                meta_b1: take("meta.b1")?,
                meta_w2: take("meta.w2")?,
                meta_b2: take("meta.b2")?,
            }),
            PromptMethod::VptShallow | PromptMethod::VptDeep => PromptKind::Vpt(VisualPrompt {
                depth: if method == PromptMethod::VptShallow {
                    VisualDepth::Shallow
                } else {
                    VisualDepth::Deep
                },
                tokens: layered("visual", &mut take),
            }),
            PromptMethod::Maple => {
                let text_layers = layered("text", &mut take);
                let mut couplings = Vec::new();
                while let (Ok(w), Ok(b)) = (
                    take(&format!("coupling.{}.weight", couplings.len())),
                    take(&format!("coupling.{}.bias", couplings.len())),
                ) {
                    couplings.push((w, b));
                }
                PromptKind::Maple(MaplePrompt {
                    text_layers,
                    couplings,
                })
            }
            PromptMethod::Promptsrc => PromptKind::Promptsrc(PromptSrcPrompt {
                text_layers: layered("text", &mut take),
                visual_layers: layered("visual", &mut take),
            }),
        };
        if !tensors.is_empty() {
            return Err(Error::Serialization(format!(
                "unexpected prompt tensors: {:?}",
                tensors.keys().collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            kind,
            options,
            prefix_words,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const PROMPT_FORMAT: &str = "kdpl-prompt/1";

/// h(x) = GELU(x W1 + b1) W2 + b2.
fn meta_net(g: &mut Graph<'_>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    g.add_row(h, b2)
}
