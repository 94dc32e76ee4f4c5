//! Versioned binary checkpoints with integrity checking.
//!
//! File layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "HCTL"
//! version u32      currently 1
//! length  u64      payload byte count
//! payload          named records, back to back
//! checksum u64     FNV-1a 64 over the payload bytes
//! ```
//!
//! Each record is `u32 name_len | name (UTF-8) | u8 dtype | u8 rank |
//! u32 dims[rank] | data`. Dtype 0 is fp32 row-major tensor data; dtype 1 is
//! a raw byte string (rank 1, the dim is the byte count) used for config,
//! RNG state, and vocabulary metadata. Record order is preserved, so
//! save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HCTL";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

/// FNV-1a 64-bit checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
}

/// An ordered bundle of named records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub records: Vec<(String, Record)>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.records.push((
            name.to_string(),
            Record::F32 { dims: t.dims().to_vec(), data: t.data().to_vec() },
        ));
    }

    pub fn push_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.records.push((name.to_string(), Record::Bytes(bytes)));
    }

    pub fn push_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)
            .map_err(|e| Error::checkpoint(format!("serializing {name}: {e}")))?;
        self.push_bytes(name, bytes);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn has(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        match self.find(name) {
            Some(Record::F32 { dims, data }) => Tensor::from_vec(dims.clone(), data.clone()),
            Some(Record::Bytes(_)) => {
                Err(Error::checkpoint(format!("record {name} is not a tensor")))
            }
            None => Err(Error::checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.find(name) {
            Some(Record::Bytes(b)) => Ok(b),
            Some(Record::F32 { .. }) => {
                Err(Error::checkpoint(format!("record {name} is not a byte record")))
            }
            None => Err(Error::checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.bytes(name)?)
            .map_err(|e| Error::checkpoint(format!("parsing {name}: {e}")))
    }

    fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match rec {
                Record::F32 { dims, data } => {
                    out.push(DTYPE_F32);
                    out.push(dims.len() as u8);
                    for &d in dims {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &x in data {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Record::Bytes(bytes) => {
                    out.push(DTYPE_BYTES);
                    out.push(1u8);
                    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                    out.extend_from_slice(bytes);
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let checksum = fnv1a64(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::checkpoint("bad magic bytes, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::checkpoint(format!(
                "version mismatch: file has {version}, this build reads {VERSION}"
            )));
        }
        let payload_len = r.u64("payload length")? as usize;
        let payload = r.take(payload_len, "payload")?.to_vec();
        let stored = r.u64("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("trailing bytes after checksum"));
        }
        let computed = fnv1a64(&payload);
        if stored != computed {
            return Err(Error::checkpoint(format!(
                "checksum failure: stored {stored:016x}, computed {computed:016x}"
            )));
        }

        let mut records = Vec::new();
        let mut r = Reader { bytes: &payload, pos: 0 };
        while r.pos < payload.len() {
            let name_len = r.u32("record name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "record name")?.to_vec())
                .map_err(|_| Error::checkpoint("record name is not UTF-8"))?;
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dim")? as usize);
            }
            let n: usize = dims.iter().product();
            match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n * 4, "tensor data")?;
                    let data: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    records.push((name, Record::F32 { dims, data }));
                }
                DTYPE_BYTES => {
                    if rank != 1 {
                        return Err(Error::checkpoint("byte record must be rank 1"));
                    }
                    let raw = r.take(n, "byte data")?.to_vec();
                    records.push((name, Record::Bytes(raw)));
                }
                other => {
                    return Err(Error::checkpoint(format!("unknown dtype tag {other}")));
                }
            }
        }
        Ok(Archive { records })
    }

    pub fn write<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(format!("truncated file while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}
