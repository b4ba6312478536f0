//! `.swft` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SWFT" | version: u32 | count: u32
//! per entry: name_len: u32 | name (UTF-8) | dtype: u8 | rank: u8 | dims: u32 * rank | payload
//! ```
//!
//! dtype 0 is f32, 1 is f64. Trailing unit dims are not written, so a
//! `[c, 1, 1, 1]` vector is stored with rank 1; readers pad back to rank 4.

use std::collections::HashSet;
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"SWFT";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "swft";

pub fn encode<'a, T: Scalar>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        let dims = t.dims().as_array();
        let rank = dims.iter().rposition(|&d| d != 1).map_or(1, |i| i + 1);
        out.push(rank as u8);
        for d in &dims[..rank] {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
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
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn payload<T: Scalar, S: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::BYTES)
        .map(|c| {
            let v = S::read_le(c);
            if S::DTYPE == T::DTYPE {
                T::read_le(c)
            } else {
                T::from_f64_lossy(v.to_f64_lossy())
            }
        })
        .collect()
}

/// Decodes a checkpoint, converting payloads to `T` when the stored dtype differs.
pub fn decode<T: Scalar>(buf: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a SWFT file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut names = HashSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32()? as usize;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let data = match dtype {
            0 => payload::<T, f32>(r.take(dims.numel() * 4)?),
            1 => payload::<T, f64>(r.take(dims.numel() * 8)?),
            other => return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {other}"))),
        };
        out.push((name, Tensor::from_vec(dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(params.iter())).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
