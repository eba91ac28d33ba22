//! Single-file model checkpoints.
//!
//! A checkpoint is a safetensors container: one little-endian `f32` tensor per
//! parameter plus a single metadata entry holding a JSON header with the format
//! version, the artifact kind and everything needed to rebuild the model. The
//! byte stream is a pure function of the parameters and header, so the SHA-256
//! of the file identifies a trained model.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Module;

pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_KEY: &str = "tokencast";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header<M> {
    version: u32,
    kind: String,
    meta: M,
}

/// Serialize `module`'s parameters together with a typed metadata record.
pub fn to_bytes<M: Serialize>(kind: &str, meta: &M, module: &dyn Module) -> Result<Vec<u8>> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        meta,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    module.visit_params(&mut |p| {
        let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((p.name.clone(), p.shape.clone(), bytes));
    });
    let mut seen = std::collections::HashSet::new();
    for (name, _, _) in &buffers {
        if !seen.insert(name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
        }
    }
    let views = buffers
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(HEADER_KEY.to_string(), json)]);
    safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Decoded checkpoint: metadata plus raw parameter tensors by name.
pub struct Loaded<M> {
    pub meta: M,
    tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl<M> Loaded<M> {
    /// Copy stored values into `module`, requiring an exact name and shape match.
    pub fn restore(&self, module: &mut dyn Module) -> Result<()> {
        let mut err = None;
        let mut used = 0;
        module.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&p.name) {
                Some((shape, values)) if *shape == p.shape => {
                    p.value.copy_from_slice(values);
                    used += 1;
                }
                Some((shape, _)) => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, model expects {:?}",
                        p.name, shape, p.shape
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing parameter {}", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored tensors not used by the model",
                self.tensors.len() - used
            )));
        }
        Ok(())
    }
}

pub fn from_bytes<M: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<Loaded<M>> {
    let (_, metadata) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("missing header".into()))?;
    let header: Header<serde_json::Value> =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            header.kind
        )));
    }
    let meta = serde_json::from_value(header.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32 tensor")));
        }
        let values = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, (view.shape().to_vec(), values));
    }
    Ok(Loaded { meta, tensors })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
