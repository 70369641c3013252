//! Flat key-value checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HAKV"
//! version u32 = 1
//! hlen    u64, then hlen bytes of UTF-8 JSON header
//! count   u64
//! count × entry:
//!     klen  u32, then klen bytes of UTF-8 key
//!     kind  u8   (0 = float64, 1 = bytes)
//!     ndim  u32, then ndim × u64 dims
//!     payload: product(dims) × f64 LE, or product(dims) raw bytes
//! ```
//!
//! Entries are written in key order, so identical state gives identical files.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

const MAGIC: &[u8; 4] = b"HAKV";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum KvValue {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    Bytes { shape: Vec<usize>, data: Vec<u8> },
}

impl KvValue {
    pub fn shape(&self) -> &[usize] {
        match self {
            KvValue::F64 { shape, .. } | KvValue::Bytes { shape, .. } => shape,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            KvValue::F64 { data, .. } => Some(data),
            KvValue::Bytes { .. } => None,
        }
    }

    pub fn as_bools(&self) -> Option<Vec<bool>> {
        match self {
            KvValue::Bytes { data, .. } => Some(data.iter().map(|&b| b != 0).collect()),
            KvValue::F64 { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvFile {
    pub header: serde_json::Value,
    pub entries: BTreeMap<String, KvValue>,
}

impl KvFile {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert_f64(&mut self, key: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(
            key.into(),
            KvValue::F64 {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn insert_mask(&mut self, key: impl Into<String>, mask: &[bool]) {
        self.entries.insert(
            key.into(),
            KvValue::Bytes {
                shape: vec![mask.len()],
                data: mask.iter().map(|&m| m as u8).collect(),
            },
        );
    }

    pub fn get(&self, key: &str) -> Option<&KvValue> {
        self.entries.get(key)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (key, value) in &self.entries {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            let (kind, shape) = match value {
                KvValue::F64 { shape, .. } => (0u8, shape),
                KvValue::Bytes { shape, .. } => (1u8, shape),
            };
            w.write_all(&[kind])?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match value {
                KvValue::F64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                KvValue::Bytes { data, .. } => w.write_all(data)?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let hlen = read_u64(&mut r)? as usize;
        let header = serde_json::from_slice(&read_bytes(&mut r, hlen)?)?;
        let count = read_u64(&mut r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let klen = read_u32(&mut r)? as usize;
            let key = String::from_utf8(read_bytes(&mut r, klen)?)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let value = match kind[0] {
                0 => {
                    let raw = read_bytes(&mut r, n * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    KvValue::F64 { shape, data }
                }
                1 => KvValue::Bytes {
                    data: read_bytes(&mut r, n)?,
                    shape,
                },
                k => return Err(CheckpointError::Format(format!("unknown kind {k} for {key}"))),
            };
            entries.insert(key, value);
        }
        Ok(Self { header, entries })
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout_of_single_entry() {
        let mut kv = KvFile::new(serde_json::json!({}));
        kv.insert_f64("a/P", &[1], vec![1.0]);
        let bytes = kv.to_bytes();
        assert_eq!(&bytes[..4], b"HAKV");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..18], b"{}");
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..30], &3u32.to_le_bytes());
        assert_eq!(&bytes[30..33], b"a/P");
        assert_eq!(bytes[33], 0);
        assert_eq!(&bytes[34..38], &1u32.to_le_bytes());
        assert_eq!(&bytes[38..46], &1u64.to_le_bytes());
        assert_eq!(&bytes[46..54], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 54);
    }

    #[test]
    fn rejects_garbage() {
        assert!(KvFile::read_from(&b"NOPE...."[..]).is_err());
        let mut kv = KvFile::new(serde_json::json!({"r": 3}));
        kv.insert_mask("m", &[true, false]);
        let bytes = kv.to_bytes();
        assert!(KvFile::read_from(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            floats in prop::collection::vec((1usize..4, 1usize..4), 0..5),
            masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..6), 0..3),
            seed in any::<u64>(),
        ) {
            let mut kv = KvFile::new(serde_json::json!({"mode": "adalora", "r": 3, "seed": seed}));
            for (i, (m, n)) in floats.iter().enumerate() {
                let data = (0..m * n).map(|t| (seed as f64) * 1e-3 - t as f64 / 7.0).collect();
                kv.insert_f64(format!("adapter{i}/P"), &[*m, *n], data);
            }
            for (i, mask) in masks.iter().enumerate() {
                kv.insert_mask(format!("adapter{i}/mask"), mask);
            }
            let back = KvFile::read_from(&kv.to_bytes()[..]).unwrap();
            prop_assert_eq!(back, kv);
        }
    }
}
