//! `GDC1` tensor checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! [preamble]  optional UTF-8 "key=value\n" lines closed by an empty line
//! "GDC1"
//! count
//! count x { name_len, name bytes, rank, rank x dim, prod(dims) x f32 }
//! ```
//!
//! Values are always stored as 32-bit floats. A file without a preamble
//! starts directly with the magic.

use std::fs;
use std::path::Path;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GDC1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedArray {
            name: name.into(),
            dims: t.shape().0.iter().map(|&d| d as u32).collect(),
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    /// Interprets the array as NCHW, left-padding lower ranks with ones.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dims.len() > 4 {
            return Err(Error::format(&self.name, format!("rank {} exceeds 4", self.dims.len())));
        }
        let mut dims = [1usize; 4];
        let off = 4 - self.dims.len();
        for (i, &d) in self.dims.iter().enumerate() {
            dims[off + i] = d as usize;
        }
        Tensor::from_vec(
            Shape(dims),
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub preamble: Vec<(String, String)>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn preamble_value(&self, key: &str) -> Option<&str> {
        self.preamble
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        if !self.preamble.is_empty() {
            for (k, v) in &self.preamble {
                out.extend_from_slice(k.as_bytes());
                out.push(b'=');
                out.extend_from_slice(v.as_bytes());
                out.push(b'\n');
            }
            out.push(b'\n');
        }
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.arrays.len() as u32);
        for a in &self.arrays {
            put_u32(&mut out, a.name.len() as u32);
            out.extend_from_slice(a.name.as_bytes());
            put_u32(&mut out, a.dims.len() as u32);
            for &d in &a.dims {
                put_u32(&mut out, d);
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |reason: &str| Error::format(origin, reason.to_string());
        let mut preamble = Vec::new();
        let mut pos = 0;
        if !bytes.starts_with(MAGIC) {
            let end = bytes
                .windows(2)
                .position(|w| w == b"\n\n")
                .ok_or_else(|| fail("missing GDC1 magic"))?;
            let text = std::str::from_utf8(&bytes[..end]).map_err(|_| fail("preamble is not UTF-8"))?;
            for line in text.lines() {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| fail("preamble line without '='"))?;
                preamble.push((k.to_string(), v.to_string()));
            }
            pos = end + 2;
            if !bytes[pos..].starts_with(MAGIC) {
                return Err(fail("missing GDC1 magic after preamble"));
            }
        }
        pos += MAGIC.len();
        let mut r = Reader { bytes, pos };
        let count = r.u32().ok_or_else(|| fail("truncated tensor count"))?;
        let mut arrays = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| fail("truncated name length"))? as usize;
            let name = r.take(name_len).ok_or_else(|| fail("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| fail("tensor name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(|| fail("truncated rank"))? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32().ok_or_else(|| fail("truncated dims"))?);
            }
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let numel = numel.ok_or_else(|| fail("dims overflow"))?;
            let raw = r
                .take(numel.checked_mul(4).ok_or_else(|| fail("dims overflow"))?)
                .ok_or_else(|| fail("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { preamble, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
