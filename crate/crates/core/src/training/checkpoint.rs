//! Checkpoint files.
//!
//! ```text
//! "QCNNCKPT"                8 bytes
//! header length             u32 little-endian
//! JSON header               UTF-8
//! blob                      f64 little-endian: parameters, then batch-norm μ per layer
//! ```
//!
//! The header records the model spec, training metadata, the shape of every
//! array in the blob, the blob's absolute byte offset and length, and its
//! CRC32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QCNNCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub bn_mu: Vec<Vec<f64>>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: ModelSpec,
    metadata: CheckpointMeta,
    arrays: Vec<ArrayInfo>,
    blob_offset: usize,
    blob_len: usize,
    crc32: u32,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Self {
            spec: model.spec().clone(),
            params: model.params().to_vec(),
            bn_mu: model.bn_state().to_vec(),
            meta,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_parts(self.spec.clone(), self.params.clone(), self.bn_mu.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::with_capacity(8 * (self.params.len() + self.bn_mu.iter().map(Vec::len).sum::<usize>()));
        for v in self.params.iter().chain(self.bn_mu.iter().flatten()) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let mut arrays = vec![ArrayInfo {
            name: "params".into(),
            shape: vec![self.params.len()],
        }];
        arrays.extend(self.bn_mu.iter().enumerate().map(|(i, mu)| ArrayInfo {
            name: format!("bn_mu.{i}"),
            shape: vec![mu.len()],
        }));
        let mut header = Header {
            version: FORMAT_VERSION,
            spec: self.spec.clone(),
            metadata: self.meta.clone(),
            arrays,
            blob_offset: 0,
            blob_len: blob.len(),
            crc32: crc32fast::hash(&blob),
        };
        // the offset is part of the header it follows; iterate to a fixed point
        let mut text = serde_json::to_vec(&header)?;
        loop {
            let offset = CHECKPOINT_MAGIC.len() + 4 + text.len();
            if offset == header.blob_offset {
                break;
            }
            header.blob_offset = offset;
            text = serde_json::to_vec(&header)?;
        }
        let mut out = Vec::with_capacity(header.blob_offset + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "bad magic, expected \"QCNNCKPT\""));
        }
        let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let text = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::parse(12, format!("truncated header: {hlen} bytes declared")))?;
        let header: Header = serde_json::from_slice(text).map_err(|e| Error::parse(12, format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::parse(12, format!("unsupported checkpoint version {}", header.version)));
        }
        let blob = bytes
            .get(header.blob_offset..header.blob_offset + header.blob_len)
            .ok_or_else(|| Error::parse(header.blob_offset, "truncated parameter blob"))?;
        if header.blob_offset + header.blob_len != bytes.len() {
            return Err(Error::parse(header.blob_offset + header.blob_len, "trailing bytes after blob"));
        }
        if crc32fast::hash(blob) != header.crc32 {
            return Err(Error::parse(header.blob_offset, "blob checksum mismatch"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let total: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if total != values.len() || blob.len() % 8 != 0 || header.arrays.first().is_none_or(|a| a.name != "params") {
            return Err(Error::parse(header.blob_offset, "array table does not describe the blob"));
        }
        let mut rest = values.as_slice();
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a.to_vec()
        };
        let params = take(header.arrays[0].shape.iter().product());
        let bn_mu = header.arrays[1..].iter().map(|a| take(a.shape.iter().product())).collect();
        let ckpt = Self {
            spec: header.spec,
            params,
            bn_mu,
            meta: header.metadata,
        };
        ckpt.to_model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
