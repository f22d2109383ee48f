//! Binary weight checkpoints: a versioned header, a string metadata block,
//! then each named array with its shape and row-major values. Byte layout is
//! fixed (little-endian), so identical weights serialize identically.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::{Init, ParameterStore};

const MAGIC: &[u8; 4] = b"MBCK";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Parse("checkpoint string is not utf-8".into()))
    }
}

/// Serialize every parameter (values only; no optimizer state) plus metadata.
pub fn to_bytes(store: &ParameterStore, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, meta.len() as u32);
    for (k, v) in meta {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    put_u32(&mut buf, store.len() as u32);
    for (_, e) in store.iter() {
        put_str(&mut buf, &e.name);
        put_u64(&mut buf, e.rows as u64);
        put_u64(&mut buf, e.cols as u64);
        for v in &e.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Rebuild a store (zeroed gradients, fresh optimizer state) and its metadata.
pub fn from_bytes(bytes: &[u8]) -> Result<(ParameterStore, BTreeMap<String, String>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let mut meta = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let mut store = ParameterStore::new();
    // Init values are overwritten below; the rng is never consulted for zeros.
    let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(0);
    let n_params = r.u32()?;
    for _ in 0..n_params {
        let name = r.string()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let id = store.register(name, rows, cols, Init::Zeros, &mut rng);
        let vals = store.value_mut(id);
        for v in vals.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after checkpoint payload".into()));
    }
    Ok((store, meta))
}

pub fn save(store: &ParameterStore, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let bytes = to_bytes(store, meta);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterStore, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
