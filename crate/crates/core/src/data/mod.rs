//! Split files, few-shot episodes, base/novel splitting, and sample materialization.

pub mod preprocess;
pub mod provider;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::{ClassSet, ImageInput};
use crate::par;
use crate::tensor::Tensor;

pub use preprocess::{patchify, preprocess, Normalization, PreprocessMode, PreprocessedImage, IMAGE_SIZE};
pub use provider::{DatasetProvider, DirectoryProvider, LoadedDataset};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticVLConfig, SyntheticWorld};

pub const SYNTHETIC_SCHEME: &str = "synthetic://";

/// A training or evaluation example ready for the encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub image: ImageInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitItem {
    pub path: String,
    pub label: usize,
    pub classname: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub tag: SplitTag,
    pub items: Vec<SplitItem>,
    pub classnames: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_set(&self) -> Result<ClassSet> {
        ClassSet::new(self.classnames.iter().cloned())
    }

    /// Items whose label is in `labels`, relabeled by position in `labels`.
    pub fn restrict(&self, labels: &[usize]) -> DatasetSplit {
        let pos: HashMap<usize, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        DatasetSplit {
            tag: self.tag,
            items: self
                .items
                .iter()
                .filter_map(|it| {
                    pos.get(&it.label).map(|&p| SplitItem {
                        label: p,
                        ..it.clone()
                    })
                })
                .collect(),
            classnames: labels.iter().map(|&l| self.classnames[l].clone()).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classnames.len()];
        for it in &self.items {
            c[it.label] += 1;
        }
        c
    }
}

/// The three splits of one dataset with a shared class list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub classnames: Vec<String>,
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl DatasetSplits {
    pub fn get(&self, tag: SplitTag) -> &DatasetSplit {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    /// Targets such as held-out test-only sets have no training data.
    pub fn trainable(&self) -> bool {
        !self.train.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitOptions {
    /// Drop the "BACKGROUND_Google" and "Faces_easy" classes and re-index.
    pub caltech101: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classnames: Option<Vec<String>>,
    #[serde(default)]
    train: Vec<(String, i64, String)>,
    #[serde(default)]
    val: Vec<(String, i64, String)>,
    #[serde(default)]
    test: Vec<(String, i64, String)>,
}

fn line_of(text: &str, needle: &str) -> usize {
    let quoted = serde_json::to_string(needle).unwrap_or_default();
    text.find(&quoted)
        .map(|at| text[..at].matches('\n').count() + 1)
        .unwrap_or(0)
}

const CALTECH_DISCARD: [&str; 2] = ["background_google", "faces_easy"];

fn caltech_discarded(name: &str) -> bool {
    let n = name.to_lowercase().replace(' ', "_");
    CALTECH_DISCARD.contains(&n.as_str())
}

/// Parse a split document: `{"train": [[path, label, name], ...], "val": [...], "test": [...]}`.
///
/// An optional `"classnames"` array fixes the class list; otherwise it is
/// derived from the records and must cover every label from 0 up.
pub fn parse_splits(text: &str, options: SplitOptions) -> Result<DatasetSplits> {
    let file: SplitFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let all = file
        .train
        .iter()
        .chain(&file.val)
        .chain(&file.test)
        .collect::<Vec<_>>();
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    if let Some(cn) = &file.classnames {
        names.extend(cn.iter().cloned().enumerate());
    }
    for (path, label, name) in &all {
        let line = || line_of(text, path);
        if *label < 0 {
            return Err(Error::Parse {
                line: line(),
                msg: format!("negative label {label} for {path}"),
            });
        }
        let label = *label as usize;
        match (&file.classnames, names.get(&label)) {
            (Some(cn), None) => {
                return Err(Error::Parse {
                    line: line(),
                    msg: format!("label {label} ≥ {} class names", cn.len()),
                })
            }
            (_, Some(existing)) if existing != name => {
                return Err(Error::Parse {
                    line: line(),
                    msg: format!("label {label} named both {existing:?} and {name:?}"),
                })
            }
            (None, None) => {
                names.insert(label, name.clone());
            }
            _ => {}
        }
    }
    let count = names.keys().next_back().map_or(0, |m| m + 1);
    if names.len() != count {
        let missing = (0..count).find(|l| !names.contains_key(l)).unwrap();
        return Err(Error::Parse {
            line: 0,
            msg: format!("no class name for label {missing}"),
        });
    }
    let mut classnames: Vec<String> = names.into_values().collect();
    let mut remap: Vec<Option<usize>> = (0..classnames.len()).map(Some).collect();
    if options.caltech101 {
        let mut kept = Vec::new();
        let mut next = 0;
        for (i, n) in classnames.iter().enumerate() {
            if caltech_discarded(n) {
                remap[i] = None;
            } else {
                remap[i] = Some(next);
                next += 1;
                kept.push(n.clone());
            }
        }
        classnames = kept;
    }
    ClassSet::new(classnames.iter().cloned())?;
    let build = |tag, recs: &[(String, i64, String)]| DatasetSplit {
        tag,
        items: recs
            .iter()
            .filter_map(|(p, l, n)| {
                remap[*l as usize].map(|label| SplitItem {
                    path: p.clone(),
                    label,
                    classname: n.clone(),
                })
            })
            .collect(),
        classnames: classnames.clone(),
    };
    let splits = DatasetSplits {
        train: build(SplitTag::Train, &file.train),
        val: build(SplitTag::Val, &file.val),
        test: build(SplitTag::Test, &file.test),
        classnames: classnames.clone(),
    };
    log::debug!(
        "{} classes; {} train / {} val / {} test items",
        classnames.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(splits)
}

pub fn load_split(path: &Path, options: SplitOptions) -> Result<DatasetSplits> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_splits(&text, options)
}

pub fn splits_to_json(splits: &DatasetSplits) -> Result<String> {
    let recs = |s: &DatasetSplit| {
        s.items
            .iter()
            .map(|it| (it.path.clone(), it.label as i64, it.classname.clone()))
            .collect()
    };
    let file = SplitFile {
        classnames: Some(splits.classnames.clone()),
        train: recs(&splits.train),
        val: recs(&splits.val),
        test: recs(&splits.test),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn write_split(path: &Path, splits: &DatasetSplits) -> Result<()> {
    std::fs::write(path, splits_to_json(splits)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotEpisode {
    pub shots: usize,
    pub seed: u64,
    pub items: Vec<SplitItem>,
}

/// `min(shots, available)` items per class, chosen by a seeded shuffle; class order preserved.
pub fn sample_few_shot(split: &DatasetSplit, shots: usize, seed: u64) -> Result<FewShotEpisode> {
    if split.tag != SplitTag::Train {
        return Err(Error::Contract(format!(
            "few-shot episodes are drawn from train splits, not {}",
            split.tag.as_str()
        )));
    }
    let mut by_class: Vec<Vec<&SplitItem>> = vec![Vec::new(); split.classnames.len()];
    for it in &split.items {
        by_class[it.label].push(it);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for mut members in by_class {
        members.shuffle(&mut rng);
        items.extend(members.into_iter().take(shots).cloned());
    }
    Ok(FewShotEpisode { shots, seed, items })
}

/// First ⌈C/2⌉ names are base, the rest novel.
pub fn base_novel_split(classnames: &[String]) -> Result<(ClassSet, ClassSet)> {
    if classnames.len() < 2 {
        return Err(Error::Contract("base/novel split needs at least 2 classes".into()));
    }
    let nb = classnames.len().div_ceil(2);
    Ok((
        ClassSet::new(classnames[..nb].iter().cloned())?,
        ClassSet::new(classnames[nb..].iter().cloned())?,
    ))
}

/// Where the pixels (or planted features) for split items come from.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    /// Precomputed feature vectors keyed by `synthetic://` id.
    Features {
        vectors: HashMap<String, Vec<f64>>,
        num_patches: usize,
    },
    /// Image files resolved against `root`.
    Files {
        root: PathBuf,
        grid: usize,
        normalization: Normalization,
    },
}

impl FeatureSource {
    pub fn load_sidecar(path: &Path, num_patches: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let (tensors, meta) = read_container(&bytes)?;
        let features = tensors
            .get("features")
            .ok_or_else(|| Error::Serialization("sidecar lacks a features array".into()))?;
        let ids: Vec<String> = serde_json::from_str(
            meta.get("ids")
                .ok_or_else(|| Error::Serialization("sidecar lacks ids".into()))?,
        )?;
        if ids.len() != features.rows() {
            return Err(Error::Serialization("sidecar id count differs from rows".into()));
        }
        let vectors = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, features.row(i).to_vec()))
            .collect();
        Ok(FeatureSource::Features {
            vectors,
            num_patches,
        })
    }

    /// Materialize items as samples; train-mode augmentation draws from `(seed, index)`.
    pub fn samples(&self, items: &[SplitItem], mode: PreprocessMode, seed: u64) -> Result<Vec<Sample>> {
        par::map_range(items.len(), |i| {
            let it = &items[i];
            let image = match self {
                FeatureSource::Features {
                    vectors,
                    num_patches,
                } => {
                    let v = vectors.get(&it.path).ok_or_else(|| Error::Data {
                        path: it.path.clone(),
                        msg: "no feature vector for this id".into(),
                    })?;
                    ImageInput::from_features(v, *num_patches)?
                }
                FeatureSource::Files {
                    root,
                    grid,
                    normalization,
                } => {
                    let path = root.join(&it.path);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
                    let img = preprocess(&path, mode, normalization, &mut rng)?;
                    patchify(&img, *grid)?
                }
            };
            Ok(Sample {
                id: it.path.clone(),
                label: it.label,
                image,
            })
        })
        .into_iter()
        .collect()
    }
}

/// Store feature vectors (rows in id order) as a sidecar container.
pub fn write_sidecar(path: &Path, ids: &[String], features: &Tensor) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("ids".to_string(), serde_json::to_string(ids)?);
    let bytes = write_container(&[("features".to_string(), features)], meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_per: usize, classes: usize) -> DatasetSplit {
        let classnames: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        DatasetSplit {
            tag: SplitTag::Train,
            items: (0..classes)
                .flat_map(|c| {
                    (0..n_per).map(move |i| SplitItem {
                        path: format!("{c}/{i}.jpg"),
                        label: c,
                        classname: format!("c{c}"),
                    })
                })
                .collect(),
            classnames,
        }
    }

    #[test]
    fn parse_and_roundtrip() {
        let text = r#"{
  "train": [["a/1.jpg", 0, "cat"], ["b/1.jpg", 1, "dog"]],
  "val": [],
  "test": [["a/2.jpg", 0, "cat"]]
}"#;
        let s = parse_splits(text, SplitOptions::default()).unwrap();
        assert_eq!(s.classnames, ["cat", "dog"]);
        assert_eq!(s.train.len(), 2);
        let back = parse_splits(&splits_to_json(&s).unwrap(), SplitOptions::default()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn test_only_target_is_valid() {
        let text = r#"{"classnames": ["a", "b"], "train": [], "test": [["x", 1, "b"]]}"#;
        let s = parse_splits(text, SplitOptions::default()).unwrap();
        assert!(!s.trainable());
        assert_eq!(s.test.len(), 1);
    }

    #[test]
    fn label_out_of_range_reports_line() {
        let text = "{\n\"classnames\": [\"a\"],\n\"train\": [\n[\"ok\", 0, \"a\"],\n[\"bad\", 3, \"z\"]\n]}";
        match parse_splits(text, SplitOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        match parse_splits("{\n\"train\": [[\"x\", \"nope\"]]}", SplitOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn caltech_convention_drops_two_classes() {
        let text = r#"{"train": [["p0", 0, "BACKGROUND_Google"], ["p1", 1, "accordion"], ["p2", 2, "Faces_easy"], ["p3", 3, "airplane"]]}"#;
        let s = parse_splits(text, SplitOptions { caltech101: true }).unwrap();
        assert_eq!(s.classnames, ["accordion", "airplane"]);
        assert_eq!(s.train.items.iter().map(|i| i.label).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn few_shot_examples() {
        let split = toy(100, 3);
        let a = sample_few_shot(&split, 16, 1).unwrap();
        assert_eq!(a, sample_few_shot(&split, 16, 1).unwrap());
        let b = sample_few_shot(&split, 16, 2).unwrap();
        let c = sample_few_shot(&split, 16, 3).unwrap();
        assert!(a != b && b != c && a != c);
        let counts = DatasetSplit {
            items: a.items.clone(),
            ..split.clone()
        }
        .class_counts();
        assert_eq!(counts, vec![16, 16, 16]);
        let small = toy(5, 2);
        assert_eq!(sample_few_shot(&small, 16, 0).unwrap().items.len(), 10);
        let test = DatasetSplit {
            tag: SplitTag::Test,
            ..small
        };
        assert!(sample_few_shot(&test, 1, 0).is_err());
    }

    #[test]
    fn base_novel_examples() {
        let names = |n: usize| (0..n).map(|i| format!("n{i}")).collect::<Vec<_>>();
        let (b, n) = base_novel_split(&names(4)).unwrap();
        assert_eq!((b.len(), n.len()), (2, 2));
        let (b, n) = base_novel_split(&names(5)).unwrap();
        assert_eq!((b.len(), n.len()), (3, 2));
        assert_eq!(b.names(), ["n0", "n1", "n2"]);
        assert!(base_novel_split(&names(1)).is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.safetensors");
        let ids = vec!["synthetic://x/train/0".to_string(), "synthetic://x/train/1".to_string()];
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        write_sidecar(&path, &ids, &t).unwrap();
        let src = FeatureSource::load_sidecar(&path, 2).unwrap();
        let items: Vec<SplitItem> = ids
            .iter()
            .map(|id| SplitItem {
                path: id.clone(),
                label: 0,
                classname: "x".into(),
            })
            .collect();
        let s = src.samples(&items, PreprocessMode::Eval, 0).unwrap();
        assert_eq!(s[1].image.patches.row(1), &[7.0, 8.0]);
    }
}
