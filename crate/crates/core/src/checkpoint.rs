//! Binary parameter checkpoints.
//!
//! Layout, all integers `u32` little-endian: the magic `SINCKPT1`, the entry
//! count, then per entry the name length, the UTF-8 name, the rank, each
//! dimension, and the row-major values as `f64` little-endian. Entries are
//! written in name order.

use std::path::Path;

use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SINCKPT1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, store.len());
    for (name, param) in store.iter() {
        push_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        let shape = param.value.shape();
        push_u32(&mut out, shape.len());
        for &d in &shape {
            push_u32(&mut out, d);
        }
        for v in param.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn push_u32(out: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&n.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return self.fail(format!("truncated: need {n} bytes for {what}, {remaining} left"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return r.fail(format!(
            "bad magic {:?}, expected \"SINCKPT1\"",
            String::from_utf8_lossy(magic)
        ));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")?;
        let raw = r.take(len, "name")?;
        let name = match std::str::from_utf8(raw) {
            Ok(s) => s.to_string(),
            Err(_) => {
                r.pos = start;
                return r.fail("entry name is not UTF-8");
            }
        };
        if store.contains(&name) {
            r.pos = start;
            return r.fail(format!("duplicate entry `{name}`"));
        }
        let rank_at = r.pos;
        let rank = r.u32("rank")?;
        if !(1..=2).contains(&rank) {
            r.pos = rank_at;
            return r.fail(format!("entry `{name}` has rank {rank}, expected 1 or 2"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|n| n.checked_mul(8).is_some()) else {
            return r.fail(format!("entry `{name}` has oversized shape {shape:?}"));
        };
        let raw = r.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::from_shape(&shape, data).expect("length matches shape");
        store.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_params(path: &Path, params: &DetectorParams) -> Result<()> {
    save_checkpoint(path, &params.to_store())
}

pub fn load_params(path: &Path) -> Result<DetectorParams> {
    DetectorParams::from_store(&load_checkpoint(path)?)
}
