//! Planted-prototype world: datasets, a near-perfect teacher, and a degraded student.
//!
//! Every class has a unit prototype in a shared space. Class prototypes of one
//! dataset share a common "domain" direction, so classes of the same dataset
//! are closer to each other than to unrelated names. Images are bags of patches,
//! each the prototype plus Gaussian noise.
//!
//! The teacher embeds an image as the mean of its patches and a class name as
//! its prototype, so it is accurate by construction. The student sees images
//! through a rank-reduced projection plus a constant offset, and class names
//! through a perturbed linear map, so a gap to the teacher exists that prompts
//! can partly close.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_sidecar, write_split, DatasetSplit, DatasetSplits, FeatureSource, SplitItem, SplitTag, SYNTHETIC_SCHEME};
use crate::distill::student::STUDENT_TEMPLATE;
use crate::distill::teacher::TEACHER_TEMPLATE;
use crate::error::{Error, Result};
use crate::model::{
    DualEncoderModel, EncoderConfig, ImageBackbone, ImageEncoder, Role, TextEncoder, Tokenizer,
    TransformerBlock, VitEncoder,
};
use crate::prompt::promptsrc::TEMPLATE_BANK;
use crate::tensor::{l2_norm, Tensor};

/// How much weaker the student is than the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentGap {
    /// Rank of the student's patch projection.
    pub rank: usize,
    /// Norm of the constant offset added to every student patch embedding.
    pub bias: f64,
    /// Scale of the random perturbation of the student's class-name map.
    pub text_noise: f64,
    /// Standard deviation of student word embeddings outside class names.
    pub word_scale: f64,
}

impl Default for StudentGap {
    fn default() -> Self {
        Self {
            rank: 24,
            bias: 1.0,
            text_noise: 0.3,
            word_scale: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticVLConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub num_patches: usize,
    pub num_layers: usize,
    /// Required gap 1 − max pairwise cosine between prototypes of one dataset.
    pub margin: f64,
    /// Per-coordinate standard deviation of patch noise.
    pub noise: f64,
    /// Weight of the shared dataset direction in each prototype.
    pub domain_weight: f64,
    pub student: StudentGap,
    pub teacher_accuracy_floor: f64,
    /// Extra vocabulary names with their own prototypes and no images.
    pub distractors: usize,
    /// Same classes, shifted image distribution.
    pub shift_targets: usize,
    pub shift_scale: f64,
    /// Different classes in a different domain.
    pub cross_targets: usize,
    pub cross_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticVLConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            train_per_class: 32,
            val_per_class: 4,
            test_per_class: 50,
            dim: 64,
            num_patches: 4,
            num_layers: 2,
            margin: 0.1,
            noise: 0.05,
            domain_weight: 0.5,
            student: StudentGap::default(),
            teacher_accuracy_floor: 0.95,
            distractors: 180,
            shift_targets: 2,
            shift_scale: 0.3,
            cross_targets: 2,
            cross_classes: 10,
            seed: 0,
        }
    }
}

impl SyntheticVLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::Config(format!("margin must be in (0, 1), got {}", self.margin)));
        }
        if !(self.noise >= 0.0) || !(self.shift_scale >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.dim == 0 || self.num_patches == 0 || self.num_layers == 0 {
            return Err(Error::Config("dim, num_patches and num_layers must be positive".into()));
        }
        if self.student.rank == 0 || self.student.rank > self.dim {
            return Err(Error::Config(format!(
                "student rank must be in 1..={}, got {}",
                self.dim, self.student.rank
            )));
        }
        if self.cross_targets > 0 && self.cross_classes < 2 {
            return Err(Error::Config("cross targets need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            shared_dim: self.dim,
            text_token_dim: self.dim,
            patch_dim: self.dim,
            num_layers: self.num_layers,
            num_patches: self.num_patches,
            patch_input_dim: self.dim,
            vocab_size: 4096,
            max_text_len: 16,
            mlp_hidden: 4,
            image_backbone: ImageBackbone::Vit,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub name: String,
    pub splits: DatasetSplits,
    pub features: HashMap<String, Vec<f64>>,
}

impl SyntheticDataset {
    pub fn feature_source(&self, num_patches: usize) -> FeatureSource {
        FeatureSource::Features {
            vectors: self.features.clone(),
            num_patches,
        }
    }

    /// Split file plus feature sidecar under `dir/<name>/`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let d = dir.join(&self.name);
        std::fs::create_dir_all(&d)?;
        write_split(&d.join("split.json"), &self.splits)?;
        let mut ids: Vec<String> = self.features.keys().cloned().collect();
        ids.sort();
        let rows: Vec<Vec<f64>> = ids.iter().map(|id| self.features[id].clone()).collect();
        write_sidecar(&d.join("features.safetensors"), &ids, &Tensor::from_rows(&rows)?)
    }
}

pub struct SyntheticWorld {
    pub config: SyntheticVLConfig,
    pub source: SyntheticDataset,
    pub shift_targets: Vec<SyntheticDataset>,
    pub cross_targets: Vec<SyntheticDataset>,
    pub teacher: DualEncoderModel,
    pub student: DualEncoderModel,
    /// Source class names mixed with distractors in a seeded order.
    pub vocabulary: Vec<String>,
    /// Teacher top-1 accuracy on the source test split, in [0, 1].
    pub teacher_accuracy: f64,
}

impl std::fmt::Debug for SyntheticWorld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticWorld")
            .field("source", &self.source.name)
            .field("teacher_accuracy", &self.teacher_accuracy)
            .finish_non_exhaustive()
    }
}

impl SyntheticWorld {
    pub fn datasets(&self) -> impl Iterator<Item = &SyntheticDataset> {
        std::iter::once(&self.source)
            .chain(&self.shift_targets)
            .chain(&self.cross_targets)
    }

    pub fn dataset(&self, name: &str) -> Option<&SyntheticDataset> {
        self.datasets().find(|d| d.name == name)
    }

    /// Every dataset, both models, and the vocabulary file under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for d in self.datasets() {
            d.write_to(dir)?;
        }
        self.teacher.save(&dir.join("teacher.safetensors"))?;
        self.student.save(&dir.join("student.safetensors"))?;
        let mut vocab = self.vocabulary.join("\n");
        vocab.push('\n');
        std::fs::write(dir.join("vocab.txt"), vocab)?;
        Ok(())
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn randn_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pa", "se", "do", "fu", "gi", "ha", "ju", "be",
    "ro", "ni", "sa", "te",
];

/// Distinct pseudo-words whose token ids collide neither with each other nor with template words.
struct NameMint {
    tokenizer: Tokenizer,
    used_ids: HashSet<u32>,
    used_names: HashSet<String>,
}

impl NameMint {
    fn new(tokenizer: Tokenizer) -> Self {
        let mut used_ids = HashSet::new();
        let templates = [TEACHER_TEMPLATE, STUDENT_TEMPLATE]
            .into_iter()
            .chain(TEMPLATE_BANK);
        for t in templates {
            for w in Tokenizer::words(&t.replace("{}", "")) {
                used_ids.insert(tokenizer.word_id(&w));
            }
        }
        Self {
            tokenizer,
            used_ids,
            used_names: HashSet::new(),
        }
    }

    fn mint<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<String> {
        for _ in 0..10_000 {
            let n = rng.random_range(2..=4);
            let name: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
            let id = self.tokenizer.word_id(&name);
            if !self.used_names.contains(&name) && !self.used_ids.contains(&id) {
                self.used_names.insert(name.clone());
                self.used_ids.insert(id);
                return Ok(name);
            }
        }
        Err(Error::Generation("ran out of distinct class names; reduce the class count".into()))
    }
}

/// Prototypes `normalize(w·domain + √(1−w²)·r_k)` meeting the cosine margin.
fn prototypes<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    domain: &[f64],
    weight: f64,
    margin: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let own = (1.0 - weight * weight).max(0.0).sqrt();
    for _ in 0..100 {
        let protos: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let r = unit(randn_vec(dim, rng));
                unit(domain.iter().zip(&r).map(|(a, b)| weight * a + own * b).collect())
            })
            .collect();
        let max_cos = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| crate::tensor::dot(&protos[i], &protos[j]))
            .fold(f64::NEG_INFINITY, f64::max);
        if max_cos <= 1.0 - margin {
            return Ok(protos);
        }
    }
    Err(Error::Generation(format!(
        "cannot place {n} prototypes with cosine margin {margin} in {dim} dimensions; use a larger dim"
    )))
}

struct Planted {
    name: String,
    classnames: Vec<String>,
    protos: Vec<Vec<f64>>,
    /// Constant added to every patch (distribution shift).
    shift: Vec<f64>,
    noise: f64,
}

fn build_dataset<R: Rng + ?Sized>(p: &Planted, cfg: &SyntheticVLConfig, rng: &mut R) -> SyntheticDataset {
    let mut features = HashMap::new();
    let mut make_split = |tag: SplitTag, per_class: usize, rng: &mut R| {
        let mut items = Vec::new();
        for (label, proto) in p.protos.iter().enumerate() {
            for _ in 0..per_class {
                let id = format!("{SYNTHETIC_SCHEME}{}/{}/{:05}", p.name, tag.as_str(), items.len());
                let mut v = Vec::with_capacity(cfg.num_patches * cfg.dim);
                for _ in 0..cfg.num_patches {
                    for (a, b) in proto.iter().zip(&p.shift) {
                        let z: f64 = StandardNormal.sample(rng);
                        v.push(a + b + p.noise * z);
                    }
                }
                features.insert(id.clone(), v);
                items.push(SplitItem {
                    path: id,
                    label,
                    classname: p.classnames[label].clone(),
                });
            }
        }
        DatasetSplit {
            tag,
            items,
            classnames: p.classnames.clone(),
        }
    };
    let train = make_split(SplitTag::Train, cfg.train_per_class, rng);
    let val = make_split(SplitTag::Val, cfg.val_per_class, rng);
    let test = make_split(SplitTag::Test, cfg.test_per_class, rng);
    SyntheticDataset {
        name: p.name.clone(),
        splits: DatasetSplits {
            classnames: p.classnames.clone(),
            train,
            val,
            test,
        },
        features,
    }
}

fn pass_through_block(width: usize, hidden: usize) -> TransformerBlock {
    TransformerBlock {
        wq: Tensor::zeros(width, width),
        bq: Tensor::zeros(1, width),
        wk: Tensor::zeros(width, width),
        bk: Tensor::zeros(1, width),
        wv: Tensor::zeros(width, width),
        bv: Tensor::zeros(1, width),
        wo: Tensor::zeros(width, width),
        bo: Tensor::zeros(1, width),
        w1: Tensor::zeros(width, hidden),
        b1: Tensor::zeros(1, hidden),
        w2: Tensor::zeros(hidden, width),
        b2: Tensor::zeros(1, width),
    }
}

/// Uniform attention that adds the token mean to every token.
fn averaging_block(width: usize, hidden: usize) -> TransformerBlock {
    TransformerBlock {
        wv: Tensor::identity(width),
        wo: Tensor::identity(width),
        ..pass_through_block(width, hidden)
    }
}

fn build_model(
    cfg: &SyntheticVLConfig,
    role: Role,
    token_embedding: Tensor,
    patch_proj: Tensor,
    patch_bias: Tensor,
) -> Result<DualEncoderModel> {
    let ec = cfg.encoder_config();
    let d = cfg.dim;
    let text = TextEncoder {
        token_embedding,
        positional: Tensor::zeros(ec.max_text_len, d),
        blocks: (0..cfg.num_layers).map(|_| pass_through_block(d, ec.mlp_hidden)).collect(),
        projection: Tensor::identity(d),
    };
    let image = ImageEncoder::Vit(VitEncoder {
        patch_proj,
        patch_bias,
        cls: Tensor::zeros(1, d),
        positional: Tensor::zeros(cfg.num_patches + 1, d),
        blocks: (0..cfg.num_layers).map(|_| averaging_block(d, ec.mlp_hidden)).collect(),
        projection: Tensor::identity(d),
    });
    DualEncoderModel::new(ec, role, text, image)
}

/// Random rank-`r` orthogonal projector (d × d).
fn projector<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Tensor {
    // Gram-Schmidt on r random directions
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    while basis.len() < r {
        let mut v = randn_vec(d, rng);
        for b in &basis {
            let c = crate::tensor::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = l2_norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut p = Tensor::zeros(d, d);
    for b in &basis {
        for i in 0..d {
            for j in 0..d {
                p.set(i, j, p.get(i, j) + b[i] * b[j]);
            }
        }
    }
    p
}

/// Generate the planted world and check the teacher reaches its accuracy floor.
pub fn generate_synthetic(cfg: &SyntheticVLConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let ec = cfg.encoder_config();
    let tokenizer = Tokenizer::new(ec.vocab_size);
    let mut mint = NameMint::new(tokenizer);

    let source_domain = unit(randn_vec(d, &mut rng));
    let mut planted = vec![Planted {
        name: "synth".into(),
        classnames: (0..cfg.num_classes).map(|_| mint.mint(&mut rng)).collect::<Result<_>>()?,
        protos: prototypes(cfg.num_classes, d, &source_domain, cfg.domain_weight, cfg.margin, &mut rng)?,
        shift: vec![0.0; d],
        noise: cfg.noise,
    }];
    for t in 0..cfg.shift_targets {
        let shift: Vec<f64> = unit(randn_vec(d, &mut rng)).into_iter().map(|x| x * cfg.shift_scale).collect();
        planted.push(Planted {
            name: format!("synth_shift{}", t + 1),
            classnames: planted[0].classnames.clone(),
            protos: planted[0].protos.clone(),
            shift,
            noise: cfg.noise * 1.5,
        });
    }
    for t in 0..cfg.cross_targets {
        let domain = unit(randn_vec(d, &mut rng));
        planted.push(Planted {
            name: format!("synth_cross{}", t + 1),
            classnames: (0..cfg.cross_classes).map(|_| mint.mint(&mut rng)).collect::<Result<_>>()?,
            protos: prototypes(cfg.cross_classes, d, &domain, cfg.domain_weight, cfg.margin, &mut rng)?,
            shift: vec![0.0; d],
            noise: cfg.noise,
        });
    }
    let distractor_names: Vec<String> = (0..cfg.distractors).map(|_| mint.mint(&mut rng)).collect::<Result<_>>()?;
    // no domain component, so they sit far from every dataset's classes
    let distractor_protos: Vec<Vec<f64>> = (0..cfg.distractors).map(|_| unit(randn_vec(d, &mut rng))).collect();

    // every named class in the world with its prototype
    let mut named: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &planted {
        for (n, v) in p.classnames.iter().zip(&p.protos) {
            named.insert(n.clone(), v.clone());
        }
    }
    for (n, v) in distractor_names.iter().zip(&distractor_protos) {
        named.insert(n.clone(), v.clone());
    }

    let mut teacher_words = Tensor::randn(ec.vocab_size, d, 0.1, &mut rng);
    let mut student_words = Tensor::randn(ec.vocab_size, d, cfg.student.word_scale, &mut rng);
    let mut a = Tensor::randn(d, d, cfg.student.text_noise / (d as f64).sqrt(), &mut rng);
    for i in 0..d {
        a.set(i, i, a.get(i, i) + 1.0);
    }
    for (name, proto) in &named {
        let id = tokenizer.word_id(name) as usize;
        teacher_words.row_mut(id).copy_from_slice(proto);
        let mapped = a.matmul(&Tensor::row_vector(proto.clone()).transpose())?;
        student_words.row_mut(id).copy_from_slice(mapped.data());
    }
    let teacher = build_model(cfg, Role::Teacher, teacher_words, Tensor::identity(d), Tensor::zeros(1, d))?;
    let bias = Tensor::row_vector(unit(randn_vec(d, &mut rng)).into_iter().map(|x| x * cfg.student.bias).collect());
    let student = build_model(
        cfg,
        Role::Student,
        student_words,
        projector(d, cfg.student.rank, &mut rng),
        bias,
    )?;

    let datasets: Vec<SyntheticDataset> = planted.iter().map(|p| build_dataset(p, cfg, &mut rng)).collect();
    let mut vocabulary: Vec<String> = planted[0].classnames.iter().cloned().chain(distractor_names).collect();
    vocabulary.shuffle(&mut rng);

    let mut iter = datasets.into_iter();
    let source = iter.next().unwrap();
    let shift_targets: Vec<_> = iter.by_ref().take(cfg.shift_targets).collect();
    let cross_targets: Vec<_> = iter.collect();
    let teacher_accuracy = teacher_accuracy(&teacher, &source, cfg.num_patches)?;
    if teacher_accuracy < cfg.teacher_accuracy_floor {
        return Err(Error::Generation(format!(
            "planted teacher reaches {:.2}% < floor {:.2}%; lower the noise or raise dim",
            teacher_accuracy * 100.0,
            cfg.teacher_accuracy_floor * 100.0
        )));
    }
    Ok(SyntheticWorld {
        config: cfg.clone(),
        source,
        shift_targets,
        cross_targets,
        teacher,
        student,
        vocabulary,
        teacher_accuracy,
    })
}

fn teacher_accuracy(teacher: &DualEncoderModel, ds: &SyntheticDataset, num_patches: usize) -> Result<f64> {
    let classes = ds.splits.test.class_set()?;
    let t = crate::distill::Teacher::new(teacher.clone(), TEACHER_TEMPLATE, crate::distill::DEFAULT_TAU)?;
    let samples = ds
        .feature_source(num_patches)
        .samples(&ds.splits.test.items, super::PreprocessMode::Eval, 0)?;
    let refs: Vec<_> = samples.iter().map(|s| (s.id.as_str(), &s.image)).collect();
    let preds = t.predict(&refs, &classes, None)?;
    let correct = preds
        .iter()
        .zip(&samples)
        .filter(|(p, s)| p.argmax() == s.label)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticVLConfig {
        SyntheticVLConfig {
            train_per_class: 4,
            val_per_class: 1,
            test_per_class: 10,
            distractors: 30,
            ..Default::default()
        }
    }

    #[test]
    fn default_world_meets_floor_and_is_reproducible() {
        let w = generate_synthetic(&small()).unwrap();
        assert!(w.teacher_accuracy >= 0.95, "{}", w.teacher_accuracy);
        let again = generate_synthetic(&small()).unwrap();
        assert_eq!(w.source.splits, again.source.splits);
        assert_eq!(w.source.features, again.source.features);
        assert_eq!(w.student, again.student);
        assert_eq!(w.vocabulary, again.vocabulary);
        assert_eq!(w.vocabulary.len(), 50);
    }

    #[test]
    fn noiseless_teacher_is_perfect() {
        let w = generate_synthetic(&SyntheticVLConfig {
            noise: 0.0,
            ..small()
        })
        .unwrap();
        assert_eq!(w.teacher_accuracy, 1.0);
    }

    #[test]
    fn splits_do_not_share_items() {
        let w = generate_synthetic(&small()).unwrap();
        for ds in w.datasets() {
            let mut seen = HashSet::new();
            for s in [&ds.splits.train, &ds.splits.val, &ds.splits.test] {
                for it in &s.items {
                    assert!(seen.insert(it.path.clone()));
                }
            }
        }
    }

    #[test]
    fn impossible_margin_is_generation_error() {
        let r = generate_synthetic(&SyntheticVLConfig {
            dim: 2,
            student: StudentGap {
                rank: 1,
                ..Default::default()
            },
            margin: 0.9,
            ..small()
        });
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn prototype_image_gets_high_teacher_probability() {
        let w = generate_synthetic(&small()).unwrap();
        let t = crate::distill::Teacher::new(w.teacher.clone(), TEACHER_TEMPLATE, 0.01).unwrap();
        let classes = w.source.splits.test.class_set().unwrap();
        let proto_img = |k: usize| {
            let id = w.teacher.tokenizer().word_id(&classes.names()[k]) as usize;
            let row = w.teacher.text_encoder().token_embedding.row(id).to_vec();
            let v: Vec<f64> = (0..4).flat_map(|_| row.clone()).collect();
            crate::model::ImageInput::from_features(&v, 4).unwrap()
        };
        for k in 0..classes.len() {
            let img = proto_img(k);
            let id = format!("proto{k}");
            let p = t.predict(&[(id.as_str(), &img)], &classes, None).unwrap();
            assert!(p[0].probs()[k] > 0.99, "{k}: {:?}", p[0].probs());
        }
    }

    #[test]
    fn suite_writes_loadable_files() {
        let w = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_to(dir.path()).unwrap();
        let splits = crate::data::load_split(&dir.path().join("synth/split.json"), Default::default()).unwrap();
        assert_eq!(splits, w.source.splits);
        let src = FeatureSource::load_sidecar(&dir.path().join("synth/features.safetensors"), 4).unwrap();
        let s = src.samples(&splits.test.items[..2], crate::data::PreprocessMode::Eval, 0).unwrap();
        assert_eq!(s[0].image.patches.data(), w.source.features[&splits.test.items[0].path].as_slice());
        let student = DualEncoderModel::load(&dir.path().join("student.safetensors")).unwrap();
        assert_eq!(student, w.student);
    }
}
