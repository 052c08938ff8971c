//! Dual-encoder vision-language models and the zero-shot head.

pub mod checkpoint;
pub mod encoder;
pub mod head;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use encoder::{
    ImageEncoder, PooledEncoder, TextEncoder, TextHook, TransformerBlock, VisualHook, VitEncoder,
};
pub use head::{
    argmax, compute_class_probabilities, cosine, probabilities_from_cosines, ClassSet,
    EmbeddingVector, ProbabilityDistribution,
};
pub use tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageBackbone {
    Vit,
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub shared_dim: usize,
    pub text_token_dim: usize,
    pub patch_dim: usize,
    pub num_layers: usize,
    pub num_patches: usize,
    pub patch_input_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub mlp_hidden: usize,
    pub image_backbone: ImageBackbone,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            shared_dim: 64,
            text_token_dim: 64,
            patch_dim: 64,
            num_layers: 2,
            num_patches: 4,
            patch_input_dim: 64,
            vocab_size: 4096,
            max_text_len: 16,
            mlp_hidden: 128,
            image_backbone: ImageBackbone::Vit,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("shared_dim", self.shared_dim),
            ("text_token_dim", self.text_token_dim),
            ("patch_dim", self.patch_dim),
            ("num_layers", self.num_layers),
            ("num_patches", self.num_patches),
            ("patch_input_dim", self.patch_input_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Token embeddings (L×d_w) ready for the text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    embeddings: Tensor,
}

impl TokenSequence {
    pub fn new(embeddings: Tensor) -> Self {
        Self { embeddings }
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// An image already split into U patches of raw values (U×patch_input_dim).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub patches: Tensor,
}

impl ImageInput {
    pub fn new(patches: Tensor) -> Self {
        Self { patches }
    }

    /// Split a flat feature vector into `num_patches` equal chunks.
    pub fn from_features(features: &[f64], num_patches: usize) -> Result<Self> {
        if num_patches == 0 || !features.len().is_multiple_of(num_patches) {
            return Err(Error::Shape(format!(
                "{} features do not split into {num_patches} patches",
                features.len()
            )));
        }
        let cols = features.len() / num_patches;
        Ok(Self {
            patches: Tensor::from_vec(num_patches, cols, features.to_vec())?,
        })
    }
}

#[derive(Debug, Default)]
struct EncodeCounters {
    text: AtomicU64,
    image: AtomicU64,
}

/// Image encoder f, text encoder g, and token embedder E_L sharing one embedding space.
#[derive(Debug)]
pub struct DualEncoderModel {
    role: Role,
    frozen: bool,
    config: EncoderConfig,
    tokenizer: Tokenizer,
    text: TextEncoder,
    image: ImageEncoder,
    counters: EncodeCounters,
}

impl Clone for DualEncoderModel {
    fn clone(&self) -> Self {
        Self {
            role: self.role,
            frozen: self.frozen,
            config: self.config.clone(),
            tokenizer: self.tokenizer,
            text: self.text.clone(),
            image: self.image.clone(),
            counters: EncodeCounters::default(),
        }
    }
}

impl PartialEq for DualEncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role
            && self.frozen == other.frozen
            && self.config == other.config
            && self.text == other.text
            && self.image == other.image
    }
}

impl DualEncoderModel {
    /// Assemble a model, checking every tensor against `config`.
    pub fn new(
        config: EncoderConfig,
        role: Role,
        text: TextEncoder,
        image: ImageEncoder,
    ) -> Result<Self> {
        config.validate()?;
        let model = Self {
            role,
            frozen: true,
            tokenizer: Tokenizer::new(config.vocab_size),
            config,
            text,
            image,
            counters: EncodeCounters::default(),
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn random<R: Rng + ?Sized>(config: EncoderConfig, role: Role, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let text = TextEncoder {
            token_embedding: Tensor::randn(c.vocab_size, c.text_token_dim, 0.5, rng),
            positional: Tensor::randn(c.max_text_len, c.text_token_dim, 0.1, rng),
            blocks: (0..c.num_layers)
                .map(|_| TransformerBlock::random(c.text_token_dim, c.mlp_hidden, rng))
                .collect(),
            projection: Tensor::randn(
                c.text_token_dim,
                c.shared_dim,
                1.0 / (c.text_token_dim as f64).sqrt(),
                rng,
            ),
        };
        let in_scale = 1.0 / (c.patch_input_dim as f64).sqrt();
        let out_scale = 1.0 / (c.patch_dim as f64).sqrt();
        let image = match c.image_backbone {
            ImageBackbone::Vit => ImageEncoder::Vit(VitEncoder {
                patch_proj: Tensor::randn(c.patch_input_dim, c.patch_dim, in_scale, rng),
                patch_bias: Tensor::randn(1, c.patch_dim, 0.02, rng),
                cls: Tensor::randn(1, c.patch_dim, 0.5, rng),
                positional: Tensor::randn(c.num_patches + 1, c.patch_dim, 0.1, rng),
                blocks: (0..c.num_layers)
                    .map(|_| TransformerBlock::random(c.patch_dim, c.mlp_hidden, rng))
                    .collect(),
                projection: Tensor::randn(c.patch_dim, c.shared_dim, out_scale, rng),
            }),
            ImageBackbone::Pooled => ImageEncoder::Pooled(PooledEncoder {
                patch_proj: Tensor::randn(c.patch_input_dim, c.patch_dim, in_scale, rng),
                patch_bias: Tensor::randn(1, c.patch_dim, 0.02, rng),
                projection: Tensor::randn(c.patch_dim, c.shared_dim, out_scale, rng),
            }),
        };
        Self::new(config, role, text, image)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let mut expected: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        expected.insert("text.token_embedding".into(), (c.vocab_size, c.text_token_dim));
        expected.insert("text.positional".into(), (c.max_text_len, c.text_token_dim));
        expected.insert("text.projection".into(), (c.text_token_dim, c.shared_dim));
        let block_shapes = |w: usize| {
            let h = c.mlp_hidden;
            [
                (w, w),
                (1, w),
                (w, w),
                (1, w),
                (w, w),
                (1, w),
                (w, w),
                (1, w),
                (w, h),
                (1, h),
                (h, w),
                (1, w),
            ]
        };
        let add_blocks = |expected: &mut BTreeMap<String, (usize, usize)>, prefix: &str, w: usize| {
            for layer in 0..c.num_layers {
                for (name, shape) in encoder::BLOCK_TENSORS.iter().zip(block_shapes(w)) {
                    expected.insert(format!("{prefix}.blocks.{layer}.{name}"), shape);
                }
            }
        };
        add_blocks(&mut expected, "text", c.text_token_dim);
        expected.insert("image.patch_proj".into(), (c.patch_input_dim, c.patch_dim));
        expected.insert("image.patch_bias".into(), (1, c.patch_dim));
        expected.insert("image.projection".into(), (c.patch_dim, c.shared_dim));
        match (&self.image, c.image_backbone) {
            (ImageEncoder::Vit(_), ImageBackbone::Vit) => {
                expected.insert("image.cls".into(), (1, c.patch_dim));
                expected.insert("image.positional".into(), (c.num_patches + 1, c.patch_dim));
                add_blocks(&mut expected, "image", c.patch_dim);
            }
            (ImageEncoder::Pooled(_), ImageBackbone::Pooled) => {}
            _ => {
                return Err(Error::Config(
                    "image encoder kind does not match image_backbone".into(),
                ))
            }
        }
        let actual = self.named_tensors();
        if actual.len() != expected.len() {
            return Err(Error::Shape(format!(
                "model has {} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for (name, t) in actual {
            match expected.get(&name) {
                Some(&shape) if shape == t.shape() => {}
                Some(&shape) => {
                    return Err(Error::Shape(format!(
                        "{name} is {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("unexpected tensor {name}"))),
            }
        }
        Ok(())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Teachers are always frozen.
    pub fn set_frozen(&mut self, frozen: bool) -> Result<()> {
        if !frozen && self.role == Role::Teacher {
            return Err(Error::Contract("a teacher model cannot be unfrozen".into()));
        }
        self.frozen = frozen;
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn has_vit(&self) -> bool {
        self.image.is_vit()
    }

    /// E_L: token ids → embeddings.
    pub fn embed_ids(&self, ids: &[u32]) -> Result<TokenSequence> {
        let table = &self.text.token_embedding;
        let mut data = Vec::with_capacity(ids.len() * table.cols());
        for &id in ids {
            if id as usize >= table.rows() {
                return Err(Error::Shape(format!("token id {id} outside vocabulary")));
            }
            data.extend_from_slice(table.row(id as usize));
        }
        Ok(TokenSequence::new(Tensor::from_vec(ids.len(), table.cols(), data)?))
    }

    pub fn embed_text(&self, text: &str) -> Result<TokenSequence> {
        self.embed_ids(&self.tokenizer.encode(text))
    }

    /// One token sequence per class from a `{}` template, in class order.
    pub fn build_handcrafted_prompts(
        &self,
        class_set: &ClassSet,
        template: &str,
    ) -> Result<Vec<TokenSequence>> {
        if template.matches("{}").count() != 1 {
            return Err(Error::Config(format!(
                "template {template:?} must contain exactly one {{}} placeholder"
            )));
        }
        class_set
            .names()
            .iter()
            .map(|name| self.embed_text(&template.replace("{}", name)))
            .collect()
    }

    /// Text encoder on a recorded graph.
    pub fn text_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: Var,
        hook: Option<&TextHook<Var>>,
    ) -> Result<Var> {
        self.counters.text.fetch_add(1, Ordering::Relaxed);
        self.text.forward(g, tokens, hook)
    }

    /// Image encoder on a recorded graph.
    pub fn image_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        image: &'a ImageInput,
        hook: Option<&VisualHook<Var>>,
    ) -> Result<Var> {
        self.counters.image.fetch_add(1, Ordering::Relaxed);
        let patches = g.weight(&image.patches);
        self.image
            .forward(g, patches, self.config.num_patches, hook)
    }

    pub fn encode_text(
        &self,
        tokens: &TokenSequence,
        hook: Option<&TextHook<Tensor>>,
    ) -> Result<EmbeddingVector> {
        let mut g = Graph::new();
        let t = g.weight(tokens.embeddings());
        let h = hook.map(|h| h.to_graph(&mut g));
        let out = self.text_graph(&mut g, t, h.as_ref())?;
        finish(g.value(out))
    }

    pub fn encode_image(
        &self,
        image: &ImageInput,
        hook: Option<&VisualHook<Tensor>>,
    ) -> Result<EmbeddingVector> {
        let mut g = Graph::new();
        let h = hook.map(|h| h.to_graph(&mut g));
        let out = self.image_graph(&mut g, image, h.as_ref())?;
        finish(g.value(out))
    }

    /// Number of text sequences encoded since the last reset.
    pub fn text_encode_count(&self) -> u64 {
        self.counters.text.load(Ordering::Relaxed)
    }

    pub fn image_encode_count(&self) -> u64 {
        self.counters.image.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.counters.text.store(0, Ordering::Relaxed);
        self.counters.image.store(0, Ordering::Relaxed);
    }

    /// Every parameter in a fixed order with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("text.token_embedding".into(), &self.text.token_embedding),
            ("text.positional".into(), &self.text.positional),
        ];
        push_blocks(&mut out, "text", &self.text.blocks);
        out.push(("text.projection".into(), &self.text.projection));
        match &self.image {
            ImageEncoder::Vit(v) => {
                out.push(("image.patch_proj".into(), &v.patch_proj));
                out.push(("image.patch_bias".into(), &v.patch_bias));
                out.push(("image.cls".into(), &v.cls));
                out.push(("image.positional".into(), &v.positional));
                push_blocks(&mut out, "image", &v.blocks);
                out.push(("image.projection".into(), &v.projection));
            }
            ImageEncoder::Pooled(p) => {
                out.push(("image.patch_proj".into(), &p.patch_proj));
                out.push(("image.patch_bias".into(), &p.patch_bias));
                out.push(("image.projection".into(), &p.projection));
            }
        }
        out
    }

    /// Mutable access to encoder weights; refused while frozen.
    pub fn parameters_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.frozen {
            return Err(Error::Contract("model is frozen".into()));
        }
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.text.token_embedding, &mut self.text.positional];
        for b in &mut self.text.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.text.projection);
        match &mut self.image {
            ImageEncoder::Vit(v) => {
                out.extend([&mut v.patch_proj, &mut v.patch_bias, &mut v.cls, &mut v.positional]);
                for b in &mut v.blocks {
                    out.extend(b.tensors_mut());
                }
                out.push(&mut v.projection);
            }
            ImageEncoder::Pooled(p) => {
                out.extend([&mut p.patch_proj, &mut p.patch_bias, &mut p.projection]);
            }
        }
        Ok(out)
    }

    pub(crate) fn from_named(
        config: EncoderConfig,
        role: Role,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Serialization(format!("missing tensor {name}")))
        };
        let blocks = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| {
            (0..config.num_layers)
                .map(|l| {
                    let mut get = |n: &str| take(&format!("{prefix}.blocks.{l}.{n}"));
                    Ok(TransformerBlock {
                        wq: get("wq")?,
                        bq: get("bq")?,
                        wk: get("wk")?,
                        bk: get("bk")?,
                        wv: get("wv")?,
                        bv: get("bv")?,
                        wo: get("wo")?,
                        bo: get("bo")?,
                        w1: get("w1")?,
                        b1: get("b1")?,
                        w2: get("w2")?,
                        b2: get("b2")?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let text = TextEncoder {
            token_embedding: take("text.token_embedding")?,
            positional: take("text.positional")?,
            blocks: blocks("text", &mut take)?,
            projection: take("text.projection")?,
        };
        let image = match config.image_backbone {
            ImageBackbone::Vit => ImageEncoder::Vit(VitEncoder {
                patch_proj: take("image.patch_proj")?,
                patch_bias: take("image.patch_bias")?,
                cls: take("image.cls")?,
                positional: take("image.positional")?,
                blocks: blocks("image", &mut take)?,
                projection: take("image.projection")?,
            }),
            ImageBackbone::Pooled => ImageEncoder::Pooled(PooledEncoder {
                patch_proj: take("image.patch_proj")?,
                patch_bias: take("image.patch_bias")?,
                projection: take("image.projection")?,
            }),
        };
        Self::new(config, role, text, image)
    }
}

fn push_blocks<'m>(out: &mut Vec<(String, &'m Tensor)>, prefix: &str, blocks: &'m [TransformerBlock]) {
    for (l, b) in blocks.iter().enumerate() {
        for (name, t) in encoder::BLOCK_TENSORS.iter().zip(b.tensors()) {
            out.push((format!("{prefix}.blocks.{l}.{name}"), t));
        }
    }
}

fn finish(out: &Tensor) -> Result<EmbeddingVector> {
    if !out.all_finite() {
        return Err(Error::Degenerate("encoder produced non-finite values".into()));
    }
    Ok(EmbeddingVector(out.row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize) -> EncoderConfig {
        EncoderConfig {
            shared_dim: 5,
            text_token_dim: 4,
            patch_dim: 3,
            num_layers: layers,
            num_patches: 2,
            patch_input_dim: 6,
            vocab_size: 97,
            max_text_len: 8,
            mlp_hidden: 7,
            image_backbone: ImageBackbone::Vit,
        }
    }

    #[test]
    fn handcrafted_prompts_keep_class_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = DualEncoderModel::random(tiny(1), Role::Student, &mut rng).unwrap();
        let cs = ClassSet::new(["airplane", "bird"]).unwrap();
        let seqs = m.build_handcrafted_prompts(&cs, "a photo of a {}").unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0], m.embed_text("a photo of a airplane").unwrap());
        assert_eq!(seqs[1], m.embed_text("a photo of a bird").unwrap());
        assert_eq!(seqs, m.build_handcrafted_prompts(&cs, "a photo of a {}").unwrap());

        let single = ClassSet::new(["x"]).unwrap();
        let s = m.build_handcrafted_prompts(&single, "{}").unwrap();
        assert_eq!(s[0], m.embed_ids(&[m.tokenizer().word_id("x")]).unwrap());
    }

    #[test]
    fn template_without_placeholder_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = DualEncoderModel::random(tiny(1), Role::Student, &mut rng).unwrap();
        let cs = ClassSet::new(["a", "b"]).unwrap();
        assert!(matches!(
            m.build_handcrafted_prompts(&cs, "a photo"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_layer_text_encoder_is_mean_then_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = tiny(1);
        cfg.num_layers = 1;
        let m = DualEncoderModel::random(cfg.clone(), Role::Student, &mut rng).unwrap();
        // strip the single block to get a zero-layer encoder
        let mut text = m.text_encoder().clone();
        text.blocks.clear();
        let tokens = Tensor::randn(3, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let out = text.forward(&mut g, t, None).unwrap();
        let got = g.value(out).row(0).to_vec();

        // oracle: mean over rows of (tokens + positional), times projection
        let mut mean = [0.0; 4];
        for r in 0..3 {
            for c in 0..4 {
                mean[c] += (tokens.get(r, c) + text.positional.get(r, c)) / 3.0;
            }
        }
        for j in 0..5 {
            let expected: f64 = (0..4).map(|c| mean[c] * text.projection.get(c, j)).sum();
            assert!((got[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_encoding_is_bitwise_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DualEncoderModel::random(tiny(2), Role::Teacher, &mut rng).unwrap();
        let s = m.embed_text("a photo of a cat").unwrap();
        let a = m.encode_text(&s, None).unwrap();
        let b = m.encode_text(&s, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 5);
        let img = ImageInput::new(Tensor::randn(2, 6, 1.0, &mut rng));
        let e = m.encode_image(&img, None).unwrap();
        assert_eq!(e.dim(), 5);
        assert_eq!(e, m.encode_image(&img, None).unwrap());
    }

    #[test]
    fn one_layer_vit_on_zero_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = DualEncoderModel::random(tiny(1), Role::Student, &mut rng).unwrap();
        let ImageEncoder::Vit(v) = m.image_encoder() else { unreachable!() };
        let img = ImageInput::new(Tensor::zeros(2, 6));
        let got = m.encode_image(&img, None).unwrap();

        // oracle with plain tensor arithmetic: every patch embeds to the bias
        let mut x = Tensor::concat_rows(&[&v.cls, &v.patch_bias, &v.patch_bias]).unwrap();
        x = x.add(&v.positional);
        let b = &v.blocks[0];
        let aff = |x: &Tensor, w: &Tensor, bias: &Tensor| {
            let mut y = x.matmul(w).unwrap();
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    y.set(r, c, y.get(r, c) + bias.get(0, c));
                }
            }
            y
        };
        let q = aff(&x, &b.wq, &b.bq);
        let k = aff(&x, &b.wk, &b.bk);
        let vv = aff(&x, &b.wv, &b.bv);
        let mut s = q.matmul(&k.transpose()).unwrap().scale(1.0 / 3f64.sqrt());
        for r in 0..3 {
            let mx = s.row(r).iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.row(r).iter().map(|z| (z - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in 0..3 {
                s.set(r, c, e[c] / tot);
            }
        }
        let x1 = x.add(&aff(&s.matmul(&vv).unwrap(), &b.wo, &b.bo));
        let h = aff(&x1, &b.w1, &b.b1).map(|z| {
            0.5 * z * (1.0 + (0.797_884_560_802_865_4 * (z + 0.044715 * z * z * z)).tanh())
        });
        let x2 = x1.add(&aff(&h, &b.w2, &b.b2));
        let expected = x2.row_tensor(0).matmul(&v.projection).unwrap();
        for (a, e) in got.values().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_visual_tokens_change_output_and_removal_restores_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DualEncoderModel::random(tiny(2), Role::Student, &mut rng).unwrap();
        let img = ImageInput::new(Tensor::randn(2, 6, 1.0, &mut rng));
        let base = m.encode_image(&img, None).unwrap();
        let hook = VisualHook {
            layers: vec![Tensor::randn(3, 3, 1.0, &mut rng)],
        };
        let prompted = m.encode_image(&img, Some(&hook)).unwrap();
        assert_ne!(base, prompted);
        assert_eq!(base, m.encode_image(&img, None).unwrap());
    }

    #[test]
    fn wrong_patch_shape_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DualEncoderModel::random(tiny(1), Role::Student, &mut rng).unwrap();
        let img = ImageInput::new(Tensor::zeros(3, 6));
        assert!(matches!(m.encode_image(&img, None), Err(Error::Shape(_))));
        let bad = TokenSequence::new(Tensor::zeros(2, 3));
        assert!(matches!(m.encode_text(&bad, None), Err(Error::Shape(_))));
    }

    #[test]
    fn teacher_cannot_be_unfrozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = DualEncoderModel::random(tiny(1), Role::Teacher, &mut rng).unwrap();
        assert!(t.parameters_mut().is_err());
        assert!(t.set_frozen(false).is_err());
        let mut s = DualEncoderModel::random(tiny(1), Role::Student, &mut rng).unwrap();
        s.set_frozen(false).unwrap();
        assert!(!s.parameters_mut().unwrap().is_empty());
    }
}
