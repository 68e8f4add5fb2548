//! The `AXCK` container:
//!
//! ```text
//! "AXCK" | version: u32 LE | header_len: u64 LE | header (JSON, header_len bytes)
//!        | payload | FNV-1a-64 of payload: u64 LE
//! ```
//!
//! The header maps each tensor name to its dtype, shape and byte range
//! within the payload and carries a free-form metadata object. Values are
//! little-endian IEEE-754.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelSpec, TensorMap};
use crate::tensor::{DType, Scalar, Shape, Tensor};
use crate::train::{Dataset, DatasetMeta};

pub const MAGIC: &[u8; 4] = b"AXCK";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the JSON header.
pub const PREAMBLE_LEN: usize = 16;

/// A tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }

    /// The tensor in precision `T`; the stored dtype must match.
    pub fn get<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor is {} but {} was requested",
                self.dtype().name(),
                T::DTYPE.name()
            )));
        }
        Ok(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }

    /// Stores `t` in its own precision.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> StoredTensor {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

/// Header entry of one tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: [usize; 4],
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: serde_json::Value,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_tensor(t));
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))?
            .get()
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = (t.shape().numel() * t.dtype().size()) as u64;
                let entry = TensorEntry {
                    dtype: t.dtype(),
                    shape: t.shape().0,
                    offset,
                    length,
                };
                offset += length;
                (name.clone(), entry)
            })
            .collect();
        Header {
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut payload = Vec::new();
        for t in self.tensors.values() {
            t.write(&mut payload);
        }
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        Ok(out)
    }

    /// Validates magic, version, layout and checksum before building any
    /// tensor.
    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing AXCK magic".into()));
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(Error::Corruption("file ends inside the preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = (bytes.len() - PREAMBLE_LEN) as u64;
        if header_len > rest.saturating_sub(8) {
            return Err(Error::Corruption(format!(
                "header length {header_len} exceeds the file"
            )));
        }
        let header_end = PREAMBLE_LEN + header_len as usize;
        let payload = &bytes[header_end..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a64(payload) != stored {
            return Err(Error::Corruption("payload checksum mismatch".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
            .map_err(|e| Error::Corruption(format!("unreadable header: {e}")))?;
        let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
        for (name, e) in &header.tensors {
            let expected = (Shape(e.shape).numel() * e.dtype.size()) as u64;
            let end = e.offset.checked_add(e.length);
            if e.length != expected || end.is_none_or(|end| end > payload.len() as u64) {
                return Err(Error::Corruption(format!("tensor {name} lies outside the payload")));
            }
            ranges.push((e.offset, e.offset + e.length, name));
        }
        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Corruption(format!(
                    "tensors {} and {} overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let shape = Shape(e.shape);
            let t = match e.dtype {
                DType::F32 => StoredTensor::F32(Tensor::from_vec(
                    shape,
                    raw.chunks_exact(4).map(f32::read_le).collect(),
                )?),
                DType::F64 => StoredTensor::F64(Tensor::from_vec(
                    shape,
                    raw.chunks_exact(8).map(f64::read_le).collect(),
                )?),
            };
            tensors.insert(name, t);
        }
        Ok(Checkpoint {
            tensors,
            metadata: header.metadata,
        })
    }

    /// FNV-1a-64 of the encoded file, as 16 hex digits.
    pub fn digest(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a64(&self.encode()?)))
    }

    pub fn from_model<T: Scalar>(model: &Model<T>, metadata: serde_json::Value) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        for (n, t) in &model.params {
            ck.insert(format!("param/{n}"), t);
        }
        for (n, t) in &model.buffers {
            ck.insert(format!("buffer/{n}"), t);
        }
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), "model".into());
        meta.insert("spec".into(), serde_json::to_value(&model.spec)?);
        meta.insert("extra".into(), metadata);
        ck.metadata = serde_json::Value::Object(meta);
        Ok(ck)
    }

    /// Rebuilds a model; every declared tensor must be present with its
    /// declared shape and nothing else may be stored under `param/` or
    /// `buffer/`.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let spec: ModelSpec = serde_json::from_value(
            self.metadata
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint does not hold a model".into()))?,
        )?;
        let arch = Architecture::new(&spec, spec.resolution)?;
        let load = |prefix: &str, decls: Vec<crate::model::ParamDecl>| -> Result<TensorMap<T>> {
            let mut out = TensorMap::new();
            for d in decls {
                let t: Tensor<T> = self.tensor(&format!("{prefix}/{}", d.name))?;
                if t.shape() != d.shape {
                    return Err(Error::Format(format!(
                        "{} has shape {}, expected {}",
                        d.name,
                        t.shape(),
                        d.shape
                    )));
                }
                out.insert(d.name, t);
            }
            let stored = self
                .tensors
                .keys()
                .filter(|k| k.starts_with(&format!("{prefix}/")))
                .count();
            if stored != out.len() {
                return Err(Error::Format(format!("checkpoint holds unexpected {prefix} tensors")));
            }
            Ok(out)
        };
        let params = load("param", arch.params())?;
        let buffers = load("buffer", arch.buffers())?;
        Ok(Model {
            spec,
            arch,
            params,
            buffers,
        })
    }
}

impl Checkpoint {
    /// Stores images as f32, and labels and marker coordinates as exact f64
    /// integers, with the dataset metadata in the header.
    pub fn from_dataset(data: &Dataset) -> Result<Checkpoint> {
        let n = data.len();
        let mut ck = Checkpoint::default();
        ck.insert("images", &data.images);
        let labels = data.labels.iter().map(|&l| l as f64).collect();
        ck.insert("labels", &Tensor::<f64>::from_vec(Shape::new(n, 1, 1, 1), labels)?);
        let markers = data
            .markers
            .iter()
            .flat_map(|[a, b]| [a.0, a.1, b.0, b.1])
            .map(|v| v as f64)
            .collect();
        ck.insert("markers", &Tensor::<f64>::from_vec(Shape::new(n, 1, 1, 4), markers)?);
        ck.metadata = serde_json::json!({"kind": "dataset", "dataset": data.meta});
        Ok(ck)
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        if self.metadata.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
            return Err(Error::Format("checkpoint does not hold a dataset".into()));
        }
        let meta: DatasetMeta = serde_json::from_value(self.metadata["dataset"].clone())?;
        let images: Tensor<f32> = self.tensor("images")?;
        let labels: Tensor<f64> = self.tensor("labels")?;
        let markers: Tensor<f64> = self.tensor("markers")?;
        let n = images.shape().batch();
        if labels.shape() != Shape::new(n, 1, 1, 1) || markers.shape() != Shape::new(n, 1, 1, 4) {
            return Err(Error::Format(format!(
                "dataset tensors disagree on the sample count {n}"
            )));
        }
        let as_index = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{v} is not a stored index")))
            }
        };
        let labels = labels.data().iter().map(|&v| as_index(v)).collect::<Result<Vec<_>>>()?;
        let markers = markers
            .data()
            .chunks_exact(4)
            .map(|c| Ok([(as_index(c[0])?, as_index(c[1])?), (as_index(c[2])?, as_index(c[3])?)]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            meta,
            images,
            labels,
            markers,
        })
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ck.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
