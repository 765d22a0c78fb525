//! Portable tensor container used for adapter weights and direction bundles.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SSTR" | version u32 | metadata_len u32 | metadata (utf-8 JSON)
//! record_count u32
//! per record: name_len u32 | name (utf-8) | dtype u8 | ndim u32 | dims u64 * ndim | payload
//! ```
//!
//! Payloads are row-major. Files carry no checksum of their own; the manifest
//! records a SHA-256 of the whole file.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSTR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|x| *x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
        }
    }
}

/// Metadata block plus named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub metadata: serde_json::Value,
    pub records: Vec<TensorRecord>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::Parse(format!("missing tensor record '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let expected: usize = r.shape.iter().product();
            if expected != r.data.len() {
                return Err(Error::Contract(format!(
                    "record '{}' has shape {:?} but {} values",
                    r.name,
                    r.shape,
                    r.data.len()
                )));
            }
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for d in &r.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &r.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse("bad magic, not a tensor record file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported tensor file version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Parse(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Parse("record name is not utf-8".into()))?;
            let tag = r.u8()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Parse(format!("record '{name}' claims {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Parse(format!("record '{name}' shape overflows")))?;
            let data = match tag {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Parse("payload overflows".into()))?)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                1 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Parse("payload overflows".into()))?)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                            .collect(),
                    )
                }
                other => return Err(Error::Parse(format!("unknown dtype tag {other}"))),
            };
            records.push(TensorRecord { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, records })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Parse(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32).sin()).collect();
            let wide: Vec<f64> = data.iter().map(|v| *v as f64 * 1.5).collect();
            let file = TensorFile {
                metadata: serde_json::json!({"seed": seed}),
                records: vec![
                    TensorRecord::f32("a", vec![rows, cols], data),
                    TensorRecord::f64("b", vec![cols, rows], wide),
                ],
            };
            let back = TensorFile::from_bytes(&file.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, file);
        }
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let file = TensorFile {
            metadata: serde_json::json!({}),
            records: vec![TensorRecord::f32("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])],
        };
        let bytes = file.to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(TensorFile::from_bytes(&bytes[..cut]), Err(Error::Parse(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorFile::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(TensorFile::from_bytes(&bad).is_err());
    }
}
