//! Versioned tensor container: `MOSRA1`, a little-endian `u32` header length,
//! a JSON header, then little-endian `f32` blobs in index order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"MOSRA1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: usize,
    /// Element count.
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    format_version: u32,
    kind: String,
    meta: M,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(TensorRecord, Tensor<f32>)>,
}

pub fn write_container<M: Serialize>(
    path: impl AsRef<Path>,
    kind: &str,
    meta: &M,
    tensors: &[(String, &Tensor<f32>, bool)],
) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0;
    let records = tensors
        .iter()
        .map(|(name, t, trainable)| {
            let rec = TensorRecord {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.len(),
                trainable: *trainable,
            };
            offset += 4 * t.len();
            rec
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: records,
    })?;
    let header_len =
        u32::try_from(header.len()).map_err(|_| Error::ModelFormat("header larger than 4 GiB".into()))?;
    let mut bytes = Vec::with_capacity(10 + header.len() + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t, _) in tensors {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::ModelFormat(format!("{}: not a MOSRA1 file (bad magic)", path.display())));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let blob_start = 10 + header_len;
    if bytes.len() < blob_start {
        return Err(Error::ModelFormat("truncated header".into()));
    }
    let header: Header<serde_json::Value> = serde_json::from_slice(&bytes[10..blob_start])
        .map_err(|e| Error::ModelFormat(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let blobs = &bytes[blob_start..];
    let mut expected = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for rec in header.tensors {
        if rec.offset != expected || rec.len != rec.shape.iter().product::<usize>() {
            return Err(Error::ModelFormat(format!("inconsistent index entry for '{}'", rec.name)));
        }
        let end = rec.offset + 4 * rec.len;
        let raw = blobs
            .get(rec.offset..end)
            .ok_or_else(|| Error::ModelFormat(format!("tensor '{}' runs past end of file", rec.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        expected = end;
        let t = Tensor {
            shape: rec.shape.clone(),
            data,
        };
        tensors.push((rec, t));
    }
    if expected != blobs.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes after last tensor",
            blobs.len() - expected
        )));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}
