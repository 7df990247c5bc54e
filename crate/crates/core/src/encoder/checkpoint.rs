//! Binary checkpoint: magic, version, JSON header, then the flat parameter
//! vector as little-endian `f32` in declared tensor order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, Layout, ParameterSet};
use crate::corpus::RelationId;
use crate::error::{LpdError, Result};

const MAGIC: &[u8; 8] = b"LPDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder<f32>,
    /// Relations whose labels the weights were fit on, in any stage.
    pub seen_relations: BTreeSet<RelationId>,
    pub labels: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    seen_relations: BTreeSet<RelationId>,
    labels: BTreeMap<String, String>,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

fn tensor_headers(layout: &Layout) -> Vec<TensorHeader> {
    layout
        .tensors()
        .map(|(name, shape, _)| TensorHeader {
            name: name.to_string(),
            shape: shape.to_vec(),
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let enc = &ckpt.encoder;
    let header = Header {
        config: enc.config.clone(),
        seen_relations: ckpt.seen_relations.clone(),
        labels: ckpt.labels.clone(),
        tensors: tensor_headers(&enc.params.layout),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(enc.params.data.len() as u64).to_le_bytes())?;
    for v in &enc.params.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LpdError::format("checkpoint", "bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(LpdError::format("checkpoint", format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    if header.tensors != tensor_headers(&layout) {
        return Err(LpdError::format("checkpoint", "tensor table does not match config"));
    }
    let mut count = [0u8; 8];
    r.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    if count != layout.total() {
        return Err(LpdError::format(
            "checkpoint",
            format!("{count} values, layout needs {}", layout.total()),
        ));
    }
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let encoder = Encoder::from_params(header.config, ParameterSet { layout, data })?;
    Ok(Checkpoint {
        encoder,
        seen_relations: header.seen_relations,
        labels: header.labels,
    })
}
