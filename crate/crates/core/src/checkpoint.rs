//! Binary parameter checkpoints.
//!
//! Layout: `b"DAGN"`, a little-endian `u32` format version, a little-endian
//! `u64` header length, the JSON header, then the raw little-endian payload.
//! The header maps every tensor name to `{"shape", "dtype", "offset"}` where
//! `offset` is relative to the start of the payload. An optional
//! `"__metadata__"` entry holds string key/value pairs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DAGN";
pub const VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamSet<T>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(params: ParamSet<T>) -> Self {
        Self {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut payload = Vec::with_capacity(self.params.num_scalars() * T::BYTES);
        for (name, t) in self.params.iter() {
            if name == METADATA_KEY {
                return Err(Error::Checkpoint(format!("reserved tensor name {name}")));
            }
            let entry = TensorEntry {
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: payload.len(),
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            t.data().iter().for_each(|v| v.write_le(&mut payload));
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        }
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing DAGN magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];

        let mut params = ParamSet::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)?;
                continue;
            }
            let entry: TensorEntry = serde_json::from_value(value)?;
            if entry.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "{name} stored as {}, requested {}",
                    entry.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = entry.shape.iter().product();
            let end = entry
                .offset
                .checked_add(n * T::BYTES)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("{name} runs past the payload")))?;
            let data = payload[entry.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            params.insert(name, Tensor::new(entry.shape, data)?);
        }
        Ok(Self { params, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::new([2], vec![1.0, -2.5]).unwrap());
        let bytes = Checkpoint::new(p).with_meta("kind", "test").to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DAGN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["a"]["shape"], serde_json::json!([2]));
        assert_eq!(header["a"]["dtype"], "f32");
        assert_eq!(header["a"]["offset"], 0);
        assert_eq!(header["__metadata__"]["kind"], "test");
        assert_eq!(&bytes[16 + hl..], &[0, 0, 128, 63, 0, 0, 32, 192]);
    }

    #[test]
    fn rejects_corruption() {
        let mut p = ParamSet::<f64>::new();
        p.insert("a", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let bytes = Checkpoint::new(p).to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&wrong).is_err());
    }
}
