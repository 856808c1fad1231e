//! Parameter checkpoints: `u64` LE header length, JSON header, then every
//! parameter value as an `f64` LE in store order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Envelope<M> {
    kind: String,
    meta: M,
    params: Vec<ParamEntry>,
}

pub fn param_layout(store: &ParamStore) -> Vec<ParamEntry> {
    store
        .ids()
        .map(|id| ParamEntry {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
            trainable: store.get(id).trainable,
        })
        .collect()
}

pub fn write<M: Serialize>(path: &Path, kind: &str, meta: &M, store: &ParamStore) -> Result<()> {
    let header = serde_json::to_vec(&Envelope {
        kind: kind.to_string(),
        meta,
        params: param_layout(store),
    })
    .map_err(|e| Error::format(path, e.to_string()))?;
    let values = store.flat_values();
    let mut buf = Vec::with_capacity(8 + header.len() + values.len() * 8);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint header and its raw values without touching any model.
pub fn read<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, Vec<ParamEntry>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let env: Envelope<M> =
        serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    if env.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind} checkpoint, found {}", env.kind),
        ));
    }
    let blob = &bytes[8 + hlen..];
    let expected: usize = env.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("parameter blob holds {} bytes, expected {}", blob.len(), expected * 8),
        ));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((env.meta, env.params, values))
}

/// Loads values into a store whose layout must match the checkpoint exactly.
pub fn restore(path: &Path, store: &mut ParamStore, layout: &[ParamEntry], values: &[f64]) -> Result<()> {
    if param_layout(store) != layout {
        return Err(Error::format(path, "parameter layout does not match the model"));
    }
    store.load_flat(values)
}
