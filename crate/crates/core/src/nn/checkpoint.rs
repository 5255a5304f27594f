//! `EQCK` container: magic, `u32` version, `u64` header length, JSON header,
//! then raw little-endian array blocks. All integers are little-endian.
//!
//! The header is `{"meta": <any>, "arrays": [{"name", "offset", "shape",
//! "dtype"}]}` with offsets relative to the start of the data section.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelDescriptor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EQCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// A named array as stored in a container.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub tensor: Tensor,
    pub dtype: Dtype,
}

/// Serialize arrays into the container format.
///
/// `F32` arrays must hold values exactly representable in `f32`; anything
/// else is rejected rather than silently rounded.
pub fn write_container(meta: &serde_json::Value, arrays: &[StoredArray]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut data = Vec::new();
    for a in arrays {
        entries.push(ArrayEntry {
            name: a.name.clone(),
            offset: data.len() as u64,
            shape: a.tensor.shape().to_vec(),
            dtype: a.dtype,
        });
        match a.dtype {
            Dtype::F32 => {
                for &v in a.tensor.data() {
                    let f = v as f32;
                    if f as f64 != v && !(v.is_nan() && f.is_nan()) {
                        return Err(Error::Checkpoint(format!(
                            "array `{}` holds {v:e}, which is not representable as f32",
                            a.name
                        )));
                    }
                    data.extend_from_slice(&f.to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in a.tensor.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        arrays: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn read_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<StoredArray>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing EQCK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * e.dtype.width();
        let raw = data
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("array `{}` out of bounds", e.name)))?;
        let values: Vec<f64> = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        arrays.push(StoredArray {
            name: e.name,
            tensor: Tensor::new(e.shape, values)?,
            dtype: e.dtype,
        });
    }
    Ok((header.meta, arrays))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub epochs: usize,
    pub seed: u64,
    pub adversarial_epsilon: Option<f64>,
    pub final_train_accuracy: Option<f64>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub metadata: TrainMetadata,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    descriptor: ModelDescriptor,
    training: TrainMetadata,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(CheckpointMeta {
            kind: "model".into(),
            descriptor: self.model.descriptor().clone(),
            training: self.metadata.clone(),
        })?;
        let arrays: Vec<StoredArray> = self
            .model
            .named_params()
            .into_iter()
            .map(|(name, t)| StoredArray {
                name,
                tensor: t.clone(),
                dtype: Dtype::F32,
            })
            .collect();
        write_container(&meta, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, arrays) = read_container(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.kind != "model" {
            return Err(Error::Checkpoint(format!(
                "container holds `{}`, not a model",
                meta.kind
            )));
        }
        let model = Model::from_named_params(
            &meta.descriptor,
            arrays.into_iter().map(|a| (a.name, a.tensor)).collect(),
        )?;
        Ok(Self {
            model,
            metadata: meta.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::report::sha256_hex(&self.to_bytes()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = build_model(&ModelDescriptor::toy_seg(4, 4), 11).unwrap();
        let ck = ModelCheckpoint {
            model,
            metadata: TrainMetadata {
                epochs: 3,
                seed: 11,
                ..Default::default()
            },
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"EQCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        for ((na, a), (nb, b)) in ck
            .model
            .named_params()
            .iter()
            .zip(back.model.named_params())
        {
            assert_eq!(na, &nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.metadata, ck.metadata);
    }

    #[test]
    fn f32_blocks_reject_lossy_values() {
        let t = Tensor::new(vec![1], vec![0.1]).unwrap();
        let err = write_container(
            &serde_json::Value::Null,
            &[StoredArray {
                name: "x".into(),
                tensor: t,
                dtype: Dtype::F32,
            }],
        );
        assert!(err.is_err());
    }

    #[test]
    fn f64_blocks_round_trip() {
        let t = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.1).sin());
        let bytes = write_container(
            &serde_json::json!({"kind": "tensors"}),
            &[StoredArray {
                name: "x".into(),
                tensor: t.clone(),
                dtype: Dtype::F64,
            }],
        )
        .unwrap();
        let (meta, arrays) = read_container(&bytes).unwrap();
        assert_eq!(meta["kind"], "tensors");
        assert_eq!(arrays[0].tensor, t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_container(b"NOPE\x01\0\0\0\0\0\0\0\0\0\0\0").is_err());
        let bytes = write_container(&serde_json::Value::Null, &[]).unwrap();
        assert!(read_container(&bytes[..bytes.len() - 1]).is_err());
    }
}
