//! Versioned binary tensor container used for model checkpoints and
//! serialized motion sequences.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "GESTCKPT"
//! version      u32       currently 1
//! count        u32       number of tensors
//! repeated `count` times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   dtype      u8        0 = f64, 1 = f32
//!   ndim       u32
//!   dims       ndim × u64
//!   data       prod(dims) × dtype size
//! ```
//!
//! Entries are kept in insertion order; names are unique.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GESTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.entries.push((name, t));
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, Tensor::scalar(v));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|t| t.data().first().copied())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DType::F64 as u8);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported schema version {version}"));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "tensor name is not UTF-8".to_string())?
                .to_string();
            let dtype = match r.take(1)?[0] {
                0 => DType::F64,
                1 => DType::F32,
                d => return Err(format!("{name}: unknown dtype {d}")),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size()).ok_or("tensor too large")?)?;
            let data = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            if c.get(&name).is_some() {
                return Err(format!("duplicate tensor {name}"));
            }
            c.entries.push((
                name,
                Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?,
            ));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(c)
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("truncated container".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let mut c = Container::new();
        c.insert("a", Tensor::from_vec(&[2], vec![1.0, -0.5]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"GESTCKPT");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], b'a');
        assert_eq!(b[21], 0);
        assert_eq!(b.len(), 8 + 4 + 4 + 4 + 1 + 1 + 4 + 8 + 16);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.insert("w", Tensor::zeros(&[3, 2]));
        let mut b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Container::from_bytes(&b).unwrap_err().contains("magic"));
        let mut b = c.to_bytes();
        b[8] = 9;
        assert!(Container::from_bytes(&b).unwrap_err().contains("version"));
    }

    #[test]
    fn reads_f32_entries() {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(b'x');
        b.push(1);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u64.to_le_bytes());
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        let c = Container::from_bytes(&b).unwrap();
        assert_eq!(c.get("x").unwrap().data(), &[1.5, -2.0]);
    }
}
