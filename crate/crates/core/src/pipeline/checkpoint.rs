//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "DHZCKPT\0"
//! version   u32
//! layout    u32 length + UTF-8 fingerprint
//! count     u32
//! blob*     u32 length + UTF-8 name, u8 tag, payload
//! ```
//!
//! Payloads: tag 0 is an f64 tensor (u32 rank, u64 dims, u64 count, f64
//! values), tag 1 UTF-8 text and tag 2 raw bytes (u64 length + bytes).

use std::collections::BTreeMap;
use std::path::Path;

use dehaze_tensor::Tensor;

use crate::error::{DehazeError, Result};
use crate::ipudn::layout_fingerprint;

pub const MAGIC: [u8; 8] = *b"DHZCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    Tensor(Tensor),
    Text(String),
    Bytes(Vec<u8>),
}

/// Named blobs plus the channel-layout fingerprint they were written under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    blobs: BTreeMap<String, Blob>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            fingerprint: layout_fingerprint(),
            blobs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, blob: Blob) {
        self.blobs.insert(name.into(), blob);
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.insert(name, Blob::Tensor(t));
    }

    pub fn insert_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.insert(name, Blob::Text(s.into()));
    }

    pub fn insert_f64s(&mut self, name: impl Into<String>, v: &[f64]) {
        let t = Tensor::new([v.len()], v.to_vec()).expect("rank-1 tensor");
        self.insert_tensor(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blobs.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    fn missing(name: &str, kind: &str) -> DehazeError {
        DehazeError::Checkpoint(format!("missing {kind} blob {name:?}"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.blobs.get(name) {
            Some(Blob::Tensor(t)) => Ok(t),
            _ => Err(Self::missing(name, "tensor")),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.blobs.get(name) {
            Some(Blob::Text(s)) => Ok(s),
            _ => Err(Self::missing(name, "text")),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.blobs.get(name) {
            Some(Blob::Bytes(b)) => Ok(b),
            _ => Err(Self::missing(name, "byte")),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        Ok(self.tensor(name)?.data())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, blob) in &self.blobs {
            put_str(&mut out, name);
            match blob {
                Blob::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for d in t.shape() {
                        out.extend_from_slice(&(*d as u64).to_le_bytes());
                    }
                    out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Blob::Text(s) => {
                    out.push(1);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Blob::Bytes(b) => {
                    out.push(2);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    /// Parses a checkpoint without checking its fingerprint.
    pub fn from_bytes_unchecked(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DehazeError::Format {
                format: "checkpoint",
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(DehazeError::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let fingerprint = r.string32()?;
        let count = r.u32()?;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let name = r.string32()?;
            let blob = match r.u8()? {
                0 => {
                    let rank = r.u32()? as usize;
                    let dims = (0..rank).map(|_| r.len64()).collect::<Result<Vec<_>>>()?;
                    let n = r.len64()?;
                    if dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d)) != Some(n) {
                        return Err(r.error("tensor element count disagrees with its shape"));
                    }
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| r.error("tensor too large"))?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Blob::Tensor(Tensor::new(dims, data)?)
                }
                1 => {
                    let n = r.len64()?;
                    let s = std::str::from_utf8(r.take(n)?).map_err(|_| r.error("text blob is not UTF-8"))?;
                    Blob::Text(s.to_owned())
                }
                2 => {
                    let n = r.len64()?;
                    Blob::Bytes(r.take(n)?.to_vec())
                }
                tag => return Err(r.error(&format!("unknown blob tag {tag}"))),
            };
            if blobs.insert(name.clone(), blob).is_some() {
                return Err(r.error(&format!("duplicate blob {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Checkpoint { fingerprint, blobs })
    }

    /// Parses a checkpoint and rejects it unless its layout fingerprint
    /// matches the running build.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = Self::from_bytes_unchecked(bytes)?;
        let expected = layout_fingerprint();
        if ckpt.fingerprint != expected {
            return Err(DehazeError::Checkpoint(format!(
                "channel layout {:?} does not match this build's {expected:?}",
                ckpt.fingerprint
            )));
        }
        Ok(ckpt)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, reason: &str) -> DehazeError {
        DehazeError::Format {
            format: "checkpoint",
            offset: self.pos,
            reason: reason.to_owned(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.error("length overflows usize"))
    }

    fn string32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| self.error("name is not UTF-8"))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| DehazeError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| DehazeError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
