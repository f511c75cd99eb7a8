//! Binary checkpoint format.
//!
//! ```text
//! magic    b"SWMAE\x01"
//! u32      metadata length, then that many bytes of UTF-8 `key=value` lines
//! u32      entry count
//! entries  u32 name length, name, u8 dtype, u8 rank, u32 dims[rank], payload
//! ```
//!
//! Integers and payloads are little-endian. Entries are written in name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Tensor};

pub const MAGIC: &[u8; 6] = b"SWMAE\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, dtype: DType) {
        self.entries.insert(name.into(), Entry { dtype, tensor });
    }

    /// Every parameter, stored as f64.
    pub fn from_params(params: &ParamStore) -> Self {
        let mut c = Checkpoint::new();
        for (name, p) in params.iter() {
            c.insert(name, p.value.clone(), DType::F64);
        }
        c
    }

    /// Entries whose names satisfy `keep`, as a parameter store.
    pub fn params_where(&self, keep: impl Fn(&str) -> bool) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (name, e) in &self.entries {
            if keep(name) {
                s.insert(name.clone(), e.tensor.clone())?;
            }
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || k.is_empty() || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry {k:?} cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.entries.len())?;
        for (name, e) in &self.entries {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype.code());
            let rank = u8::try_from(e.tensor.rank())
                .map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
            out.push(rank);
            for &d in e.tensor.shape() {
                put_u32(&mut out, d)?;
            }
            match e.dtype {
                DType::F64 => e.tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => e
                    .tensor
                    .data()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic or unsupported version".into()));
        }
        let meta_len = r.u32("metadata length")?;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut c = Checkpoint::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line {line:?}")))?;
            c.metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("entry count")?;
        for _ in 0..count {
            let n = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype code {code}")))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")?);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * dtype.size(), "payload")?;
            let data: Vec<f64> = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if c.entries.insert(name.clone(), Entry { dtype, tensor }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    /// Writes through a temporary file so a crash never leaves a half
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}
