//! Precomputed target features for draft training.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes   b"TKADSET1"
//! header_len  u64
//! header      JSON      DatasetHeader
//! entries     count ×   { len: u32, features: len × d_model × f32, tokens: len × u32 }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{corpus_hash, validate_corpus, Token};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::target::{TargetConfig, TargetModel};

pub const DATASET_MAGIC: &[u8; 8] = b"TKADSET1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub config: TargetConfig,
    pub corpus_hash: String,
    pub d_model: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub tokens: Vec<Token>,
    /// Row-major `[tokens.len(), d_model]`, stored at 32-bit precision.
    pub features: Vec<f32>,
}

impl DatasetEntry {
    pub fn feature_tensor(&self, d_model: usize) -> Tensor {
        Tensor::matrix(
            self.tokens.len(),
            d_model,
            self.features.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("entry layout")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub header: DatasetHeader,
    pub entries: Vec<DatasetEntry>,
}

/// Runs the target over every corpus sequence and stores its features.
pub fn precompute_features(target: &TargetModel, corpus: &[Vec<Token>]) -> Result<FeatureDataset> {
    validate_corpus(corpus, target.config().vocab_size)?;
    let entries = corpus
        .iter()
        .map(|seq| {
            let out = target.forward(seq)?;
            Ok(DatasetEntry {
                tokens: seq.clone(),
                features: out.features.data().iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureDataset {
        header: DatasetHeader {
            format_version: 1,
            config: target.config().clone(),
            corpus_hash: corpus_hash(corpus),
            d_model: target.config().d_model,
            count: entries.len(),
        },
        entries,
    })
}

impl FeatureDataset {
    pub fn d_model(&self) -> usize {
        self.header.d_model
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for e in &self.entries {
            buf.extend_from_slice(&(e.tokens.len() as u32).to_le_bytes());
            for v in &e.features {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for &t in &e.tokens {
                buf.extend_from_slice(&(t as u32).to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        if cur.take(8)? != DATASET_MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let hlen = cur.u64()? as usize;
        let header: DatasetHeader =
            serde_json::from_slice(cur.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
        let d = header.d_model;
        let mut entries = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let len = cur.u32()? as usize;
            let features = cur
                .take(len * d * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tokens = cur
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as Token)
                .collect();
            entries.push(DatasetEntry { tokens, features });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last entry"));
        }
        Ok(FeatureDataset { header, entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
