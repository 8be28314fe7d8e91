//! Single-file binary container for checkpoints and embedding banks.
//!
//! Layout:
//!
//! ```text
//! "SEDM"            4 bytes magic
//! version           u32 little-endian, currently 1
//! header_len        u64 little-endian
//! header            canonical JSON (sorted keys, no whitespace)
//! payload           f32 little-endian values, tensors in header order
//! ```
//!
//! Tensors live in memory as f64 and are rounded to f32 on write, so a
//! load followed by a save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamConfig, AdamState, ParamSet, RunningStats, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEDM";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;
/// Refuse headers larger than this before allocating for them.
const MAX_HEADER_LEN: u64 = 64 << 20;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerDescriptor {
    pub config: AdamConfig,
    pub step: u64,
    /// Name of the parameter group the moments belong to.
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    architecture: String,
    seed: u64,
    metadata: BTreeMap<String, serde_json::Value>,
    optimizers: Vec<OptimizerDescriptor>,
    speakers: Option<Vec<String>>,
    tensors: Vec<TensorDescriptor>,
    payload_len: u64,
    payload_sha256: String,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub architecture: String,
    pub seed: u64,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub optimizers: Vec<OptimizerDescriptor>,
    pub speakers: Option<Vec<String>>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: &str, architecture: &str, seed: u64) -> Self {
        Archive {
            kind: kind.to_string(),
            architecture: architecture.to_string(),
            seed,
            metadata: BTreeMap::new(),
            optimizers: Vec::new(),
            speakers: None,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("metadata key {key:?} missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Corrupt(format!("metadata {key:?}: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} missing")))
    }

    /// Requires `kind` and `architecture` to match.
    pub fn expect(&self, kind: &str, architecture: &str) -> Result<()> {
        if self.kind != kind || self.architecture != architecture {
            return Err(Error::Corrupt(format!(
                "expected a {kind}/{architecture} file, found {}/{}",
                self.kind, self.architecture
            )));
        }
        Ok(())
    }

    /// Stores every tensor of `params` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrites every tensor of `params` from the archive, checking shapes.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let t = self.tensor(&format!("{prefix}{name}"))?;
            params
                .assign(&name, t.clone())
                .map_err(|e| Error::Corrupt(format!("{prefix}{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn push_stats(&mut self, prefix: &str, stats: &RunningStats) {
        let d = stats.dim();
        self.push(format!("{prefix}.mean"), Tensor::from_parts(vec![1, d], stats.mean.clone()));
        self.push(format!("{prefix}.var"), Tensor::from_parts(vec![1, d], stats.var.clone()));
    }

    pub fn load_stats(&self, prefix: &str, stats: &mut RunningStats) -> Result<()> {
        let mean = self.tensor(&format!("{prefix}.mean"))?;
        let var = self.tensor(&format!("{prefix}.var"))?;
        if mean.shape() != [1, stats.dim()] || var.shape() != [1, stats.dim()] {
            return Err(Error::Corrupt(format!("{prefix}: running statistics have the wrong width")));
        }
        if var.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Corrupt(format!("{prefix}: negative running variance")));
        }
        stats.mean = mean.data().to_vec();
        stats.var = var.data().to_vec();
        Ok(())
    }

    /// Stores Adam moments for a parameter group.
    pub fn push_optimizer(&mut self, group: &str, params: &ParamSet, state: &AdamState) {
        self.optimizers.push(OptimizerDescriptor {
            config: state.config,
            step: state.step,
            group: group.to_string(),
        });
        for ((name, _), (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
            self.push(format!("adam.{group}.m.{name}"), m.clone());
            self.push(format!("adam.{group}.v.{name}"), v.clone());
        }
    }

    pub fn load_optimizer(&self, group: &str, params: &ParamSet) -> Result<AdamState> {
        let desc = self
            .optimizers
            .iter()
            .find(|o| o.group == group)
            .ok_or_else(|| Error::Corrupt(format!("optimizer group {group:?} missing")))?;
        let mut state = AdamState::new(params, desc.config);
        state.step = desc.step;
        for (i, (name, p)) in params.iter().enumerate() {
            let m = self.tensor(&format!("adam.{group}.m.{name}"))?;
            let v = self.tensor(&format!("adam.{group}.v.{name}"))?;
            if !m.same_shape(p) || !v.same_shape(p) {
                return Err(Error::Corrupt(format!("optimizer moments for {name} have the wrong shape")));
            }
            state.m[i] = m.clone();
            state.v[i] = v.clone();
        }
        Ok(state)
    }

    fn payload(&self) -> (Vec<TensorDescriptor>, Vec<u8>) {
        let mut descriptors = Vec::with_capacity(self.tensors.len());
        let total: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut payload = Vec::with_capacity(total * 4);
        for (name, t) in &self.tensors {
            descriptors.push(TensorDescriptor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &x in t.data() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        (descriptors, payload)
    }

    /// Checksum of the quantized payload; identifies the file contents.
    pub fn payload_sha256(&self) -> String {
        sha256_hex(&self.payload().1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate tensor name {name:?}")));
            }
            if t.data().iter().any(|x| !(*x as f32).is_finite()) {
                return Err(Error::NonFinite { op: "checkpoint save" });
            }
        }
        let (tensors, payload) = self.payload();
        let header = Header {
            kind: self.kind.clone(),
            architecture: self.architecture.clone(),
            seed: self.seed,
            metadata: self.metadata.clone(),
            optimizers: self.optimizers.clone(),
            speakers: self.speakers.clone(),
            tensors,
            payload_len: payload.len() as u64,
            payload_sha256: sha256_hex(&payload),
        };
        // Going through `Value` sorts every object's keys.
        let json = serde_json::to_string(&serde_json::to_value(&header)?)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(Error::Corrupt("file shorter than the fixed prefix".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - PREFIX_LEN) as u64 {
            return Err(Error::Corrupt("header length exceeds file size".into()));
        }
        let header_end = PREFIX_LEN + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if header.payload_len != payload.len() as u64 {
            return Err(Error::Corrupt(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_len
            )));
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(Error::Corrupt("payload checksum mismatch".into()));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut cursor: u64 = 0;
        for d in &header.tensors {
            if d.offset != cursor {
                return Err(Error::Corrupt(format!("tensor {:?} is not contiguous", d.name)));
            }
            let numel = d
                .shape
                .iter()
                .try_fold(1usize, |acc, &s| if s == 0 { None } else { acc.checked_mul(s) })
                .filter(|_| !d.shape.is_empty())
                .ok_or_else(|| Error::Corrupt(format!("tensor {:?} has an invalid shape", d.name)))?;
            let len = (numel as u64)
                .checked_mul(4)
                .filter(|l| cursor + l <= payload.len() as u64)
                .ok_or_else(|| Error::Corrupt(format!("tensor {:?} overruns the payload", d.name)))?;
            let raw = &payload[cursor as usize..(cursor + len) as usize];
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(d.shape.clone(), data)
                .map_err(|e| Error::Corrupt(format!("tensor {:?}: {e}", d.name)))?;
            tensors.push((d.name.clone(), t));
            cursor += len;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Corrupt("payload has trailing bytes".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        if !tensors.iter().all(|(n, _)| names.insert(n.as_str())) {
            return Err(Error::Corrupt("duplicate tensor name".into()));
        }
        Ok(Archive {
            kind: header.kind,
            architecture: header.architecture,
            seed: header.seed,
            metadata: header.metadata,
            optimizers: header.optimizers,
            speakers: header.speakers,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Checksum of a file on disk, used for provenance records.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
