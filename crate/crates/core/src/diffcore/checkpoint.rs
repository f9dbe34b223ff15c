//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `LINGRID1`, then for each parameter in store
//! order: name length (`u32` LE), UTF-8 name, rank (`u32` LE), each dimension
//! (`u32` LE), and the values as row-major `f32` LE. The file ends after the
//! last parameter.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LINGRID1";

pub fn write_checkpoint<S: Real>(store: &ParamStore<S>, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    for p in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes<S: Real>(store: &ParamStore<S>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("writing to memory");
    buf
}

pub fn save<S: Real>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(store))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads values into an existing store. Names, order and shapes must match
/// exactly.
pub fn read_checkpoint<S: Real>(store: &mut ParamStore<S>, bytes: &[u8]) -> Result<()> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("unknown magic".into()));
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if cur.pos == bytes.len() {
            return Err(Error::Checkpoint(format!(
                "missing parameter `{}`",
                store.name(id)
            )));
        }
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if name != store.name(id) {
            return Err(Error::Checkpoint(format!(
                "name mismatch: file has `{name}`, model expects `{}`",
                store.name(id)
            )));
        }
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        if shape != store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: file has {shape:?}, model expects {:?}",
                store.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        *store.value_mut(id) = Tensor::new(shape, data);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing data after last parameter".into()));
    }
    Ok(())
}

pub fn load<S: Real>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(store, &bytes)
}
