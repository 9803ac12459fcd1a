//! Binary checkpoint: an 8-byte little-endian header length, a JSON header,
//! then every parameter as little-endian `f32` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::diffcore::{ParamGroup, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "futuredet-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Free-form training metadata (epoch, seed, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<F: Real>(path: &Path, model: &Model<F>, meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for p in model.params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            offset,
            len: p.value.len(),
        });
        offset += p.value.len();
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        meta,
        params: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for p in model.params.iter() {
        for &v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        file: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<(CheckpointHeader, u64)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| format_err(path, 0, "truncated header length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(format_err(path, 0, format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| format_err(path, 8, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| format_err(path, 8 + e.column() as u64, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(format_err(
            path,
            8,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    Ok((header, 8 + len))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    Ok(read_header(path, &mut r)?.0)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(Model<F>, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let (header, data_start) = read_header(path, &mut r)?;
    let mut store = ParamStore::new();
    let mut expected = 0usize;
    for e in &header.params {
        if e.offset != expected || e.len != e.shape.iter().product::<usize>() {
            return Err(format_err(
                path,
                data_start,
                format!("inconsistent entry for {}", e.name),
            ));
        }
        let byte_offset = data_start + 4 * e.offset as u64;
        let mut bytes = vec![0u8; 4 * e.len];
        r.read_exact(&mut bytes).map_err(|_| {
            format_err(path, byte_offset, format!("truncated data for {}", e.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.insert(&e.name, e.group, Tensor::new(e.shape.clone(), data)?)?;
        expected += e.len;
    }
    let model = Model::from_params(header.config.clone(), store)?;
    Ok((model, header))
}
