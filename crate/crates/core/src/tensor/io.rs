//! Length-prefixed binary framing for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FVC1" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | rank: u32 | dims: u64 × rank | values: f64 × Πdims
//! ```
//!
//! Rank-0 tensors (scalars) carry no dims and one value.

use std::io::{self, Write};

use super::{Result, Tensor, TensorError};

pub const FORMAT_MAGIC: &[u8; 4] = b"FVC1";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    w.write_all(FORMAT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TensorError::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != FORMAT_MAGIC {
        return Err(TensorError::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let start = c.pos;
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| TensorError::Format {
                offset: start + 4,
                reason: "name is not utf-8".into(),
            })?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dim")? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = c.take(count.checked_mul(8).unwrap_or(usize::MAX), "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TensorError::Format {
            offset: start,
            reason: e.to_string(),
        })?;
        out.push((name, t));
    }
    Ok(out)
}
