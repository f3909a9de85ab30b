//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header listing `(name, shape, offset)` per tensor, then the values of
//! all tensors as little-endian f64 in header order. Offsets count f64
//! values from the start of the data block.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<CheckpointEntry>,
}

/// Writes every tensor of each store, with its name prefixed.
pub fn write_checkpoint<W: Write>(mut w: W, stores: &[(&str, &ParamStore)]) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (prefix, store) in stores {
        for (_, name, t) in store.iter() {
            entries.push(CheckpointEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader { tensors: entries })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, store) in stores {
        for (_, _, t) in store.iter() {
            for v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(Error::Data("checkpoint data block is not a multiple of 8 bytes".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    header
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Data(format!("tensor {} runs past the data block", e.name)))?;
            Ok((e.name, Tensor::new(&e.shape, slice.to_vec())?))
        })
        .collect()
}

impl ParamStore {
    /// Overwrites values of every tensor in `self` from checkpoint entries
    /// named `prefix + name`. Shapes must agree; missing tensors are an error.
    pub fn load_prefixed(&mut self, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
        let ids: Vec<_> = self.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            let full = format!("{prefix}{name}");
            let (_, src) = entries
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {full}")))?;
            let dst = self.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::dim("load_prefixed", dst.shape(), src.shape()));
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}
