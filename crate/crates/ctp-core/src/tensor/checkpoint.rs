//! Named parameter sets and their deterministic binary serialization.
//!
//! File layout (all integers little-endian):
//! magic 4 bytes, format version `u32`, length-prefixed config JSON,
//! then one record per tensor until EOF: length-prefixed UTF-8 name,
//! rank `u32`, dims `u32` each, raw `f32` values. Records are ordered
//! lexicographically by name so identical parameters always produce
//! identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CTPK";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"CTPE";
pub const FORMAT_VERSION: u32 = 1;

/// Shape descriptor that fully determines every parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Topology {
    /// Input feature width of the graphs this model consumes.
    pub d_in: usize,
    /// Embedding dimension of context, label, and prompt nodes.
    pub d: usize,
    /// Edge-type vocabulary of the prompt graph.
    pub prompt_etypes: usize,
    /// Attention heads of the refinement layer.
    pub heads: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            d_in: 768,
            d: 256,
            prompt_etypes: 3,
            heads: 1,
        }
    }
}

/// Named learnable tensors plus the topology that produced their shapes.
#[derive(Clone)]
pub struct ParamSet<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
    topology: Topology,
}

impl<T: Real> ParamSet<T> {
    pub fn new(topology: Topology) -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
            topology,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        assert!(
            self.tensors.insert(name.to_string(), t).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        *slot = t;
        Ok(())
    }

    /// Names in lexicographic (= serialization) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_f64(&self) -> ParamSet<f64> {
        let mut out = ParamSet::new(self.topology.clone());
        for (name, t) in &self.tensors {
            out.insert(name, t.to_f64().with_grad());
        }
        out
    }

    pub fn to_f32(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new(self.topology.clone());
        for (name, t) in &self.tensors {
            out.insert(name, t.to_f32().with_grad());
        }
        out
    }
}

/// A serialized model: format version, caller-owned config JSON, and
/// the parameter table.
#[derive(Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: String,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(config_json: String, params: ParamSet<f32>) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            config_json,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&CHECKPOINT_MAGIC, &self.config_json, &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (version, config_json, params) = decode_file(path, &CHECKPOINT_MAGIC)?;
        let topology: Topology = extract_topology(&config_json)?;
        let mut ps = ParamSet::new(topology);
        for (name, t) in params {
            ps.insert(&name, t.with_grad());
        }
        Ok(Checkpoint {
            version,
            config_json,
            params: ps,
        })
    }

    /// SHA-256 over the serialized bytes, hex-encoded.
    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        hex(&h.finalize())
    }
}

fn extract_topology(config_json: &str) -> Result<Topology> {
    let v: serde_json::Value = serde_json::from_str(config_json)
        .map_err(|e| Error::Checkpoint(format!("config blob is not valid JSON: {e}")))?;
    let topo = v
        .get("topology")
        .ok_or_else(|| Error::Checkpoint("config blob lacks a topology section".to_string()))?;
    serde_json::from_value(topo.clone())
        .map_err(|e| Error::Checkpoint(format!("bad topology section: {e}")))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode<T: Real>(magic: &[u8; 4], config_json: &str, params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    // BTreeMap iteration is already lexicographic.
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

type Decoded = (u32, String, Vec<(String, Tensor<f32>)>);

pub fn decode_file(path: &Path, expected_magic: &[u8; 4]) -> Result<Decoded> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode(&bytes, expected_magic)
}

pub fn decode(bytes: &[u8], expected_magic: &[u8; 4]) -> Result<Decoded> {
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".to_string()))?;
    if &magic != expected_magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected_magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)
        .map_err(|_| Error::Checkpoint("truncated config blob".to_string()))?;
    let config_json = String::from_utf8(cfg)
        .map_err(|_| Error::Checkpoint("config blob is not UTF-8".to_string()))?;

    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf) {
            Ok(0) => break,
            Ok(4) => {}
            _ => return Err(Error::Checkpoint("truncated tensor record".to_string())),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated tensor name".to_string()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
            data.push(f32::from_le_bytes(b));
        }
        let (rows, cols) = match dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has unsupported rank {rank}"
                )))
            }
        };
        tensors.push((name, Tensor::new(rows, cols, data)));
    }
    Ok((version, config_json, tensors))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated u32".to_string()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn sha256_hex_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}
