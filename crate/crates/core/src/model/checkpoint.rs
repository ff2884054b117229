//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LNPT" | u32 version | u64 header_len | header JSON (UTF-8)
//! | array section: raw f64 arrays in header order
//! | mask section (optional): one LSB-first packed bitset per array
//! ```
//!
//! Header offsets are byte offsets relative to the start of their section.
//! Serialization is deterministic, so save → load → save reproduces the
//! same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelError, ModelSpec, Parameters};
use crate::data::Standardizer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LNPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    name: String,
    len: u64,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: Option<ModelSpec>,
    seed: u64,
    preprocessing: Option<Standardizer>,
    meta: BTreeMap<String, String>,
    arrays: Vec<ArrayEntry>,
    mask: Option<Vec<MaskEntry>>,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: Option<ModelSpec>,
    pub seed: u64,
    pub preprocessing: Option<Standardizer>,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
    /// One keep-bit vector per array, in array order.
    pub mask: Option<Vec<Vec<bool>>>,
}

impl Checkpoint {
    pub fn from_params(spec: &ModelSpec, params: &Parameters, seed: u64) -> Self {
        let arrays = params
            .layout()
            .iter()
            .enumerate()
            .map(|(i, info)| (info.name.clone(), params.tensor(i)))
            .collect();
        Checkpoint {
            spec: Some(spec.clone()),
            seed,
            preprocessing: None,
            meta: BTreeMap::new(),
            arrays,
            mask: None,
        }
    }

    /// A spec-less container of named matrices.
    pub fn from_arrays(arrays: Vec<(String, Tensor)>) -> Self {
        Checkpoint {
            spec: None,
            seed: 0,
            preprocessing: None,
            meta: BTreeMap::new(),
            arrays,
            mask: None,
        }
    }

    /// Rebuilds parameters, checking names and shapes against the spec.
    pub fn params(&self) -> Result<(ModelSpec, Parameters)> {
        let spec = self
            .spec
            .clone()
            .ok_or_else(|| CheckpointError::Layout("checkpoint has no model spec".into()))?;
        spec.validate()?;
        let template = Parameters::zeros(&spec);
        if template.layout().len() != self.arrays.len() {
            return Err(CheckpointError::Layout(format!(
                "spec has {} tensors, checkpoint has {}",
                template.layout().len(),
                self.arrays.len()
            )));
        }
        let mut flat = Vec::with_capacity(template.len());
        for (info, (name, t)) in template.layout().iter().zip(&self.arrays) {
            if &info.name != name || info.shape != t.shape() {
                return Err(CheckpointError::Layout(format!(
                    "expected {} {:?}, found {} {:?}",
                    info.name,
                    info.shape,
                    name,
                    t.shape()
                )));
            }
            flat.extend_from_slice(t.data());
        }
        let params = template.with_flat(flat)?;
        Ok((spec, params))
    }

    /// Flattened keep bits in parameter order, if a mask section exists.
    pub fn flat_mask(&self) -> Option<Vec<bool>> {
        self.mask.as_ref().map(|m| m.iter().flatten().copied().collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let mask = match &self.mask {
            None => None,
            Some(bits) => {
                if bits.len() != self.arrays.len() {
                    return Err(CheckpointError::Layout("mask needs one bitset per array".into()));
                }
                let mut entries = Vec::new();
                let mut offset = 0u64;
                for ((name, t), b) in self.arrays.iter().zip(bits) {
                    if b.len() != t.numel() {
                        return Err(CheckpointError::Layout(format!("mask for {name} has wrong length")));
                    }
                    entries.push(MaskEntry {
                        name: name.clone(),
                        len: b.len() as u64,
                        offset,
                    });
                    offset += b.len().div_ceil(8) as u64;
                }
                Some(entries)
            }
        };
        let header = Header {
            spec: self.spec.clone(),
            seed: self.seed,
            preprocessing: self.preprocessing.clone(),
            meta: self.meta.clone(),
            arrays,
            mask,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(bits) = &self.mask {
            for b in bits {
                out.extend(pack_bits(b));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u64::from_le_bytes(cur.take(8, "header length")?.try_into().unwrap());
        let hlen = usize::try_from(hlen).map_err(|_| CheckpointError::Truncated("header"))?;
        let header: Header = serde_json::from_slice(cur.take(hlen, "header")?)?;
        let data_start = cur.pos;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut data_len = 0usize;
        for e in &header.arrays {
            if e.dtype != "f64" {
                return Err(CheckpointError::Layout(format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = data_start + e.offset as usize;
            let end = start + 8 * n;
            let raw = bytes.get(start..end).ok_or(CheckpointError::Truncated("array data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((e.name.clone(), Tensor::new(e.shape.clone(), data).map_err(ModelError::from)?));
            data_len = data_len.max(end - data_start);
        }
        let mask = match &header.mask {
            None => None,
            Some(entries) => {
                let mask_start = data_start + data_len;
                let mut bits = Vec::with_capacity(entries.len());
                for e in entries {
                    let start = mask_start + e.offset as usize;
                    let nbytes = (e.len as usize).div_ceil(8);
                    let raw = bytes
                        .get(start..start + nbytes)
                        .ok_or(CheckpointError::Truncated("mask section"))?;
                    bits.push(unpack_bits(raw, e.len as usize));
                }
                Some(bits)
            }
        };
        Ok(Checkpoint {
            spec: header.spec,
            seed: header.seed,
            preprocessing: header.preprocessing,
            meta: header.meta,
            arrays,
            mask,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }
}

/// Packs bits LSB-first within each byte.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, preset, InputShape};
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let spec = preset("mlp-tiny", InputShape::Flat { dim: 3 }, 2).unwrap();
        let params = init(&spec, 11);
        let mut ck = Checkpoint::from_params(&spec, &params, 11);
        ck.meta.insert("role".into(), "teacher".into());
        ck.preprocessing = Some(Standardizer {
            mean: vec![0.1, 1.0 / 3.0, -2.5],
            std: vec![1.0, 0.7, 1e-3],
        });
        ck.mask = Some(ck.arrays.iter().map(|(_, t)| (0..t.numel()).map(|i| i % 3 != 1).collect()).collect());
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let (spec, params) = back.params().unwrap();
        assert_eq!(params.flat(), init(&spec, 11).flat());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LNPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn bit_packing_is_lsb_first() {
        assert_eq!(pack_bits(&[true, false, false, false, false, false, false, false, true]), vec![1, 1]);
        assert_eq!(pack_bits(&[false, true, true]), vec![0b110]);
    }

    proptest! {
        #[test]
        fn bits_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..100)) {
            prop_assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
        }
    }
}
