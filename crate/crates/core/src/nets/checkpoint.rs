//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "GIBBSCKP"
//! version      u32      1
//! desc_len     u32      length of the descriptor
//! descriptor   bytes    architecture as UTF-8 JSON
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       bytes    UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   data       product(dims) × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GIBBSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let desc = serde_json::to_vec(model.arch())
        .map_err(|e| Error::Contract(format!("architecture descriptor: {e}")))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(desc.len() as u32).to_le_bytes())?;
    w.write_all(&desc)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.params().iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.buf.len(),
                msg: format!("checkpoint truncated, needed {n} bytes at {}", self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: "invalid UTF-8".into(),
        })
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut c = Cursor { buf: &raw, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a checkpoint file".into(),
        });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let desc_len = c.u32()? as usize;
    let desc_at = c.pos;
    let desc = c.text(desc_len)?;
    let arch: Architecture = serde_json::from_str(&desc).map_err(|e| Error::Parse {
        offset: desc_at,
        msg: format!("architecture descriptor: {e}"),
    })?;
    let count = c.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.text(name_len)?;
        let ndim = c.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = c.take(n.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: c.pos,
            msg: "tensor size overflows".into(),
        })?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(dims, data)?);
    }
    if c.pos != raw.len() {
        return Err(Error::Parse {
            offset: c.pos,
            msg: "trailing bytes after the last tensor".into(),
        });
    }
    Model::from_parts(arch, tensors)
}
