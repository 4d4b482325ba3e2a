//! Checkpoint container.
//!
//! ```text
//! magic   8 bytes  "R21UNET\0"
//! version u32 LE
//! hlen    u64 LE   length of the JSON header
//! header  hlen bytes of JSON: config, metadata, tensor table
//! data    f32 LE values, concatenated in table order
//! ```
//!
//! Each table entry is `{name, shape, offset, len}` with offsets counted in
//! elements from the start of the data section. Running statistics of batch
//! norms appear as `<gamma name>.running_mean` / `.running_var`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelBundle, ModelMetadata, NetConfig, Tensor};
use crate::datasetio::write_atomic;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"R21UNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    metadata: ModelMetadata,
    tensors: Vec<Entry>,
}

const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<&Tensor<f32>> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, t: &'_ Tensor<f32>, tensors: &mut Vec<Entry>| {
            tensors.push(Entry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        };
        for (n, t) in self.param_names().iter().zip(self.params()) {
            push(n.clone(), t, &mut tensors);
            data.push(t);
        }
        for (g, m, v) in self.running_stats() {
            push(format!("{}{MEAN_SUFFIX}", self.param_names()[*g]), m, &mut tensors);
            push(format!("{}{VAR_SUFFIX}", self.param_names()[*g]), v, &mut tensors);
            data.push(m);
            data.push(v);
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in data {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidData {
            path: path.into(),
            reason: reason.into(),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|source| Error::Json { path: path.into(), source })?;
        let data = &bytes[20 + hlen..];
        let read = |e: &Entry| -> Result<Tensor<f32>> {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad(&format!("tensor {} shape does not match its length", e.name)));
            }
            let raw = data
                .get(e.offset * 4..(e.offset + e.len) * 4)
                .ok_or_else(|| bad(&format!("tensor {} is truncated", e.name)))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(&e.shape, vals))
        };
        let mut params = Vec::new();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for e in &header.tensors {
            let t = read(e)?;
            if let Some(base) = e.name.strip_suffix(MEAN_SUFFIX) {
                means.push((base.to_string(), t));
            } else if let Some(base) = e.name.strip_suffix(VAR_SUFFIX) {
                vars.push((base.to_string(), t));
            } else {
                params.push((e.name.clone(), t));
            }
        }
        if means.len() != vars.len() {
            return Err(bad("running means and variances do not pair up"));
        }
        let running = means
            .into_iter()
            .zip(vars)
            .map(|((a, m), (b, v))| if a == b { Ok((a, m, v)) } else { Err(bad("running statistics out of order")) })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(header.config, header.metadata, params, running).map_err(|e| bad(&e.to_string()))
    }

    /// Atomic write (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact { path: path.into() },
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }
}
