//! Flat named-tensor checkpoint container.
//!
//! Layout: the magic line `DMXCKPT1\n`, one JSON header line (architecture,
//! tensor index and content hash), then every tensor's values as
//! little-endian `f64` in index order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{Architecture, NamedTensor, NetworkParams};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"DMXCKPT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Architecture,
    tensors: Vec<TensorEntry>,
    content_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let header = Header {
        arch: params.arch().clone(),
        tensors: params
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                rows: t.tensor.rows(),
                cols: t.tensor.cols(),
            })
            .collect(),
        content_hash: params.content_hash(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for t in params.tensors() {
        for v in t.tensor.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut reader = BufReader::new(bytes);
    let mut magic = vec![0u8; MAGIC.len()];
    reader
        .read_exact(&mut magic)
        .map_err(|_| NnError::Checkpoint("truncated file".into()))?;
    if magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| NnError::Checkpoint(format!("header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in header.tensors {
        let mut data = Vec::with_capacity(entry.rows * entry.cols);
        for _ in 0..entry.rows * entry.cols {
            reader
                .read_exact(&mut buf)
                .map_err(|_| NnError::Checkpoint(format!("truncated tensor {}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(NamedTensor {
            name: entry.name,
            tensor: Tensor::from_vec(entry.rows, entry.cols, data)?,
        });
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    let params = NetworkParams::from_parts(header.arch, tensors)?;
    if params.content_hash() != header.content_hash {
        return Err(NnError::Checkpoint("content hash mismatch".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    decode_checkpoint(&fs::read(path)?)
}
