//! Named-tensor checkpoint container (safetensors layout, f64 payloads).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{DualEncoderModel, EncoderConfig, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const META_KEY: &str = "kdpl";

/// Serialize named 2-D tensors plus string metadata.
pub fn write_container(
    tensors: &[(String, &Tensor)],
    metadata: BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.to_le_bytes(), vec![t.rows(), t.cols()]))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| Ok((n.clone(), TensorView::new(Dtype::F64, s.clone(), b)?)))
        .collect::<Result<Vec<_>>>()?;
    // a single metadata key keeps the header byte-stable (HashMap order is random)
    let mut meta = HashMap::new();
    meta.insert(META_KEY.to_string(), serde_json::to_string(&metadata)?);
    Ok(safetensors::serialize(views, &Some(meta))?)
}

/// Metadata only; tensor payloads are not decoded.
pub fn read_container_metadata(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let (_, header) = SafeTensors::read_metadata(bytes)?;
    Ok(match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
        Some(json) => serde_json::from_str(json)?,
        None => BTreeMap::new(),
    })
}

pub fn read_container(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let metadata = read_container_metadata(bytes)?;
    let st = SafeTensors::deserialize(bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Serialization(format!("{name} is not f64")));
        }
        let (rows, cols) = match view.shape() {
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Serialization(format!(
                    "{name} has rank {} (expected 2)",
                    other.len()
                )))
            }
        };
        tensors.insert(name, Tensor::from_le_bytes(rows, cols, view.data())?);
    }
    Ok((tensors, metadata))
}

const MODEL_FORMAT: &str = "kdpl-dual-encoder/1";

fn header(meta: &BTreeMap<String, String>) -> Result<(EncoderConfig, Role)> {
    if meta.get("format").map(String::as_str) != Some(MODEL_FORMAT) {
        return Err(Error::Serialization("not a dual-encoder checkpoint".into()));
    }
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Serialization(format!("checkpoint lacks {k}")))
    };
    Ok((serde_json::from_str(field("config")?)?, serde_json::from_str(field("role")?)?))
}

impl DualEncoderModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), MODEL_FORMAT.into());
        meta.insert("config".into(), serde_json::to_string(self.config())?);
        meta.insert("role".into(), serde_json::to_string(&self.role())?);
        write_container(&self.named_tensors(), meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, role) = header(&read_container_metadata(bytes)?)?;
        let (tensors, _) = read_container(bytes)?;
        Self::from_named(config, role, tensors)
    }

    /// Config and role of a checkpoint file without building the model.
    pub fn peek(path: &Path) -> Result<(EncoderConfig, Role)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        header(&read_container_metadata(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}
