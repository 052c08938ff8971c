//! Toy transformer encoders with prompt injection points.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-layer replacement of the text context rows `start..start + M`.
///
/// `layers[j]` replaces the context rows before transformer layer `j + 1`;
/// layer 0 sees whatever contexts the caller placed in the input sequence.
#[derive(Clone, Debug)]
pub struct TextHook<T> {
    pub start: usize,
    pub layers: Vec<T>,
}

/// Visual prompt tokens for a ViT image encoder.
///
/// `layers[0]` is inserted right after the CLS token at the input; `layers[l]`
/// for `l ≥ 1` replaces those prompt rows before layer `l`. Layers past the end
/// of the list carry the previous layer's prompt outputs through.
#[derive(Clone, Debug)]
pub struct VisualHook<T> {
    pub layers: Vec<T>,
}

impl TextHook<Tensor> {
    pub fn to_graph<'a>(&self, g: &mut Graph<'a>) -> TextHook<Var> {
        TextHook {
            start: self.start,
            layers: self.layers.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

impl VisualHook<Tensor> {
    pub fn to_graph<'a>(&self, g: &mut Graph<'a>) -> VisualHook<Var> {
        VisualHook {
            layers: self.layers.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Pre-activation-free residual block: `x + Attn(x)` then `x + MLP(x)`, single head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub(crate) const BLOCK_TENSORS: [&str; 12] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2",
];

impl TransformerBlock {
    pub fn random<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        let w = 1.0 / (width as f64).sqrt();
        let h = 1.0 / (hidden as f64).sqrt();
        Self {
            wq: Tensor::randn(width, width, w, rng),
            bq: Tensor::randn(1, width, 0.02, rng),
            wk: Tensor::randn(width, width, w, rng),
            bk: Tensor::randn(1, width, 0.02, rng),
            wv: Tensor::randn(width, width, w, rng),
            bv: Tensor::randn(1, width, 0.02, rng),
            wo: Tensor::randn(width, width, w * 0.5, rng),
            bo: Tensor::randn(1, width, 0.02, rng),
            w1: Tensor::randn(width, hidden, w, rng),
            b1: Tensor::randn(1, hidden, 0.02, rng),
            w2: Tensor::randn(hidden, width, h * 0.5, rng),
            b2: Tensor::randn(1, width, 0.02, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub(crate) fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn affine<'a>(g: &mut Graph<'a>, x: Var, w: &'a Tensor, b: &'a Tensor) -> Result<Var> {
        let wv = g.weight(w);
        let bv = g.weight(b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let q = Self::affine(g, x, &self.wq, &self.bq)?;
        let k = Self::affine(g, x, &self.wk, &self.bk)?;
        let v = Self::affine(g, x, &self.wv, &self.bv)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (self.width() as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(attn, v)?;
        let out = Self::affine(g, mixed, &self.wo, &self.bo)?;
        let x = g.add(x, out)?;
        let h = Self::affine(g, x, &self.w1, &self.b1)?;
        let h = g.gelu(h);
        let h = Self::affine(g, h, &self.w2, &self.b2)?;
        g.add(x, h)
    }
}

/// Replace rows `start..start + rows(new)` of `x`.
fn replace_rows(g: &mut Graph<'_>, x: Var, start: usize, new: Var) -> Result<Var> {
    let total = g.value(x).rows();
    let n = g.value(new).rows();
    if start + n > total {
        return Err(Error::Shape(format!(
            "cannot replace rows {start}..{} of a {total}-row sequence",
            start + n
        )));
    }
    let mut parts = Vec::with_capacity(3);
    if start > 0 {
        parts.push(g.slice_rows(x, 0, start)?);
    }
    parts.push(new);
    if start + n < total {
        parts.push(g.slice_rows(x, start + n, total)?);
    }
    g.concat_rows(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub token_embedding: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub projection: Tensor,
}

impl TextEncoder {
    pub fn token_dim(&self) -> usize {
        self.token_embedding.cols()
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    /// Token sequence (L×d_w) → mean-pooled, projected feature (1×d).
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: Var,
        hook: Option<&TextHook<Var>>,
    ) -> Result<Var> {
        let (len, dim) = g.value(tokens).shape();
        if dim != self.token_dim() {
            return Err(Error::Shape(format!(
                "token dim {dim}, encoder expects {}",
                self.token_dim()
            )));
        }
        if len == 0 || len > self.max_len() {
            return Err(Error::Shape(format!(
                "sequence length {len} outside 1..={}",
                self.max_len()
            )));
        }
        let pos = g.weight(&self.positional);
        let pos = g.slice_rows(pos, 0, len)?;
        let mut x = g.add(tokens, pos)?;
        for (layer, block) in self.blocks.iter().enumerate() {
            if let Some(h) = hook {
                if layer >= 1 {
                    if let Some(&ctx) = h.layers.get(layer - 1) {
                        x = replace_rows(g, x, h.start, ctx)?;
                    }
                }
            }
            x = block.forward(g, x)?;
        }
        let pooled = g.mean_rows(x);
        let proj = g.weight(&self.projection);
        g.matmul(pooled, proj)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitEncoder {
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub cls: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub projection: Tensor,
}

/// Patch MLP + mean pooling; a stand-in for convolutional backbones with no
/// token sequence to prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEncoder {
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub projection: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageEncoder {
    Vit(VitEncoder),
    Pooled(PooledEncoder),
}

impl ImageEncoder {
    pub fn patch_input_dim(&self) -> usize {
        match self {
            ImageEncoder::Vit(v) => v.patch_proj.rows(),
            ImageEncoder::Pooled(p) => p.patch_proj.rows(),
        }
    }

    pub fn is_vit(&self) -> bool {
        matches!(self, ImageEncoder::Vit(_))
    }

    /// Patches (U×raw) → projected feature (1×d).
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        patches: Var,
        num_patches: usize,
        hook: Option<&VisualHook<Var>>,
    ) -> Result<Var> {
        let (u, raw) = g.value(patches).shape();
        if u != num_patches || raw != self.patch_input_dim() {
            return Err(Error::Shape(format!(
                "image has {u} patches of {raw} values; expected {num_patches} of {}",
                self.patch_input_dim()
            )));
        }
        match self {
            ImageEncoder::Pooled(p) => {
                if hook.is_some() {
                    return Err(Error::UnsupportedBackbone(
                        "visual prompts need a ViT image encoder".into(),
                    ));
                }
                let w = g.weight(&p.patch_proj);
                let b = g.weight(&p.patch_bias);
                let e = g.matmul(patches, w)?;
                let e = g.add_row(e, b)?;
                let e = g.gelu(e);
                let pooled = g.mean_rows(e);
                let proj = g.weight(&p.projection);
                g.matmul(pooled, proj)
            }
            ImageEncoder::Vit(v) => {
                let w = g.weight(&v.patch_proj);
                let b = g.weight(&v.patch_bias);
                let e = g.matmul(patches, w)?;
                let e = g.add_row(e, b)?;
                let cls = g.weight(&v.cls);
                let x = g.concat_rows(&[cls, e])?;
                let pos = g.weight(&v.positional);
                let mut x = g.add(x, pos)?;
                let mut prompt_rows = 0;
                if let Some(first) = hook.and_then(|h| h.layers.first()) {
                    prompt_rows = g.value(*first).rows();
                    let head = g.slice_rows(x, 0, 1)?;
                    let tail = g.slice_rows(x, 1, u + 1)?;
                    x = g.concat_rows(&[head, *first, tail])?;
                }
                for (layer, block) in v.blocks.iter().enumerate() {
                    if let Some(h) = hook {
                        if layer >= 1 {
                            if let Some(&tokens) = h.layers.get(layer) {
                                if g.value(tokens).rows() != prompt_rows {
                                    return Err(Error::Shape(
                                        "visual prompt count changes between layers".into(),
                                    ));
                                }
                                x = replace_rows(g, x, 1, tokens)?;
                            }
                        }
                    }
                    x = block.forward(g, x)?;
                }
                let cls_out = g.slice_rows(x, 0, 1)?;
                let proj = g.weight(&v.projection);
                g.matmul(cls_out, proj)
            }
        }
    }
}
