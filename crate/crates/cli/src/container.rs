//! Two-file tensor container: `manifest.json` describing every tensor and
//! the metadata, and `weights.bin` holding the little-endian tensor bytes in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

const RESERVED_KEYS: [&str; 2] = ["format_version", "tensors"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// In-memory container. Metadata keys other than the reserved
/// `format_version` and `tensors` are kept verbatim, including keys this
/// tool does not interpret.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: BTreeMap<String, Value>,
    tensors: Vec<Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> CliResult<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(CliError::Validation(format!(
                "tensor {name}: shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(CliError::Validation(format!("duplicate tensor {name}")));
        }
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn f32(&self, name: &str) -> CliResult<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Tensor {
                shape,
                data: TensorData::F32(v),
                ..
            }) => Ok((shape, v)),
            Some(_) => Err(CliError::Validation(format!("tensor {name} is not f32"))),
            None => Err(CliError::Validation(format!("missing tensor {name}"))),
        }
    }

    pub fn i8(&self, name: &str) -> CliResult<(&[usize], &[i8])> {
        match self.get(name) {
            Some(Tensor {
                shape,
                data: TensorData::I8(v),
                ..
            }) => Ok((shape, v)),
            Some(_) => Err(CliError::Validation(format!("tensor {name} is not i8"))),
            None => Err(CliError::Validation(format!("missing tensor {name}"))),
        }
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> CliResult<()> {
        if RESERVED_KEYS.contains(&key) {
            return Err(CliError::Validation(format!("metadata key {key} is reserved")));
        }
        let v = serde_json::to_value(value).map_err(|e| CliError::Validation(e.to_string()))?;
        self.metadata.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> CliResult<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| CliError::Validation(format!("missing metadata key {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| CliError::Validation(format!("metadata {key}: {e}")))
    }

    /// Manifest and blob bytes.
    pub fn encode(&self) -> CliResult<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let offset = blob.len() as u64;
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
                TensorData::I8(v) => v.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Validation(e.to_string()))?;
        text.push(b'\n');
        Ok((text, blob))
    }

    /// Parses and validates manifest and blob bytes. `origin` only labels
    /// errors.
    pub fn decode(manifest: &[u8], blob: &[u8], origin: &Path) -> CliResult<Self> {
        let m: Manifest =
            serde_json::from_slice(manifest).map_err(|e| CliError::format(origin, format!("manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(CliError::format(
                origin,
                format!("unsupported format_version {}", m.format_version),
            ));
        }
        let mut tensors = Vec::with_capacity(m.tensors.len());
        let mut end = 0u64;
        for e in &m.tensors {
            let elems: usize = e.shape.iter().product();
            let expected = (elems * e.dtype.size()) as u64;
            if e.length != expected {
                return Err(CliError::format(
                    origin,
                    format!(
                        "tensor {}: length {} does not match shape {:?}",
                        e.name, e.length, e.shape
                    ),
                ));
            }
            if e.offset < end {
                return Err(CliError::format(
                    origin,
                    format!("tensor {}: offsets overlap or descend", e.name),
                ));
            }
            end = e
                .offset
                .checked_add(e.length)
                .filter(|&x| x <= blob.len() as u64)
                .ok_or_else(|| {
                    CliError::format(origin, format!("tensor {}: extends past the end of the blob", e.name))
                })?;
            let bytes = &blob[e.offset as usize..end as usize];
            let data = match e.dtype {
                DType::F32 => TensorData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            };
            if tensors.iter().any(|t: &Tensor| t.name == e.name) {
                return Err(CliError::format(origin, format!("duplicate tensor {}", e.name)));
            }
            tensors.push(Tensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        if end != blob.len() as u64 {
            return Err(CliError::format(origin, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            metadata: m.metadata,
            tensors,
        })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mp = dir.join(MANIFEST_FILE);
        fs::write(&mp, manifest).map_err(|e| CliError::io(&mp, e))?;
        let bp = dir.join(BLOB_FILE);
        fs::write(&bp, blob).map_err(|e| CliError::io(&bp, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let manifest = fs::read(&mp).map_err(|e| CliError::io(&mp, e))?;
        let bp = dir.join(BLOB_FILE);
        let blob = fs::read(&bp).map_err(|e| CliError::io(&bp, e))?;
        Self::decode(&manifest, &blob, dir)
    }
}
