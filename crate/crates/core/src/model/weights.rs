//! Binary weights container.
//!
//! Layout, all integers little-endian: magic `DAGW`, `u32` version (1),
//! `u64` tensor count, then per tensor a `u32` name length, the UTF-8 name,
//! a `u32` rank, one `u64` per extent, and the `f32` data in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DAGW";
pub const VERSION: u32 = 1;

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
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

pub fn save_weights(store: &ParamStore, sink: &mut impl Write) -> Result<()> {
    sink.write_all(&encode_weights(store))?;
    Ok(())
}

pub fn write_weights_file(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(store))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a weights file. Either the whole store is returned or an error;
/// a partially read store is never exposed.
pub fn decode_weights(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected `DAGW`".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = c.u64("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > c.remaining() / 8 {
            return Err(Error::Format(format!("truncated file in extents of `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(c.u64("extent")?)
                .map_err(|_| Error::Format(format!("extent of `{name}` overflows")))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("size of `{name}` overflows")))?;
            shape.push(d);
        }
        let nbytes = len
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("size of `{name}` overflows")))?;
        let raw = c.take(nbytes, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        store
            .insert(name.clone(), tensor)
            .map_err(|_| Error::Format(format!("duplicate tensor name `{name}`")))?;
    }
    if c.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", c.remaining())));
    }
    Ok(store)
}

pub fn load_weights(source: &mut impl Read) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_weights(&bytes)
}

pub fn read_weights_file(path: &Path) -> Result<ParamStore> {
    decode_weights(&std::fs::read(path)?)
}
