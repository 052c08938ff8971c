//! Named dataset lookup for scenario runs.

use std::path::PathBuf;

use super::{load_split, DatasetSplits, FeatureSource, Normalization, SplitOptions, SyntheticWorld};
use crate::error::{Error, Result};

/// Splits plus the source of their pixels or features.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub name: String,
    pub splits: DatasetSplits,
    pub source: FeatureSource,
}

pub trait DatasetProvider: Sync {
    /// A missing dataset is a [`Error::Data`].
    fn load(&self, name: &str) -> Result<LoadedDataset>;
}

impl DatasetProvider for SyntheticWorld {
    fn load(&self, name: &str) -> Result<LoadedDataset> {
        let ds = self.dataset(name).ok_or_else(|| Error::Data {
            path: name.to_string(),
            msg: "no such synthetic dataset".into(),
        })?;
        Ok(LoadedDataset {
            name: ds.name.clone(),
            splits: ds.splits.clone(),
            source: ds.feature_source(self.config.num_patches),
        })
    }
}

/// `root/<name>/split.json`, with `features.safetensors` beside it when the
/// dataset ships precomputed features and image files otherwise.
#[derive(Clone, Debug)]
pub struct DirectoryProvider {
    pub root: PathBuf,
    pub num_patches: usize,
    pub grid: usize,
    pub normalization: Normalization,
}

impl DirectoryProvider {
    pub fn new(root: impl Into<PathBuf>, num_patches: usize) -> Self {
        let grid = (num_patches as f64).sqrt().round() as usize;
        Self {
            root: root.into(),
            num_patches,
            grid,
            normalization: Normalization::default(),
        }
    }
}

impl DatasetProvider for DirectoryProvider {
    fn load(&self, name: &str) -> Result<LoadedDataset> {
        let dir = self.root.join(name);
        let options = SplitOptions {
            caltech101: name.eq_ignore_ascii_case("caltech101"),
        };
        let splits = load_split(&dir.join("split.json"), options)?;
        let sidecar = dir.join("features.safetensors");
        let source = if sidecar.exists() {
            FeatureSource::load_sidecar(&sidecar, self.num_patches)?
        } else {
            if self.grid * self.grid != self.num_patches {
                return Err(Error::Config(format!(
                    "{} patches do not form a square grid for image files",
                    self.num_patches
                )));
            }
            FeatureSource::Files {
                root: dir,
                grid: self.grid,
                normalization: self.normalization,
            }
        };
        Ok(LoadedDataset {
            name: name.to_string(),
            splits,
            source,
        })
    }
}
