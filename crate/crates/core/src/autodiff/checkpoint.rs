//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"WSDD"  u32 version  u32 count
//! count x { u32 name_len, name bytes (UTF-8), u32 rank, rank x u64 dim, f64 data... }
//! ```
//!
//! Model checkpoints and dataset images share this format.

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WSDD";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 8 * t.rank() + 8 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_path_buf(),
            offset: at as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a tensor container; `file` only labels errors.
pub fn decode(bytes: &[u8], file: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic bytes, expected \"WSDD\""));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.fail(4, format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.fail(start + 4, "tensor name is not UTF-8"))?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(r.fail(start, format!("duplicate tensor name {name:?}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            if d == 0 {
                return Err(r.fail(r.pos - 8, format!("zero extent in tensor {name:?}")));
            }
            shape.push(d as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| r.fail(start, format!("tensor {name:?} larger than the file")))?;
        let raw = r.take(8 * n, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
