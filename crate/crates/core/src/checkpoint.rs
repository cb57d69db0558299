//! Versioned single-file archive of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "CGHCKPT\0"
//! version  u32
//! config   u32 length + UTF-8 TOML
//! meta     u32 length + UTF-8 JSON
//! count    u32
//! count x  { u16 name length, name, u8 dtype (0 f32, 1 f64, 2 i64),
//!            u8 rank, rank x u64 dims, raw element bytes }
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CghError, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"CGHCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::I64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub config_toml: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> CghError {
    CghError::Checkpoint(msg.into())
}

impl Archive {
    pub fn new(config_toml: String, meta: serde_json::Value) -> Self {
        Self { config_toml, meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: ArrayData) -> Result<()> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(bad(format!("{name}: dims {dims:?} do not match {} elements", data.len())));
        }
        if self.get(&name).is_some() {
            return Err(bad(format!("duplicate array {name}")));
        }
        self.arrays.push(NamedArray { name, dims: dims.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name).ok_or_else(|| bad(format!("missing array {name}")))
    }

    /// Stores every tensor of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), &t.shape, ArrayData::F32(t.data.clone()))?;
        }
        Ok(())
    }

    /// Fills a store with a known layout from `prefix/` entries.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let a = self.require(&format!("{prefix}/{name}"))?;
            let ArrayData::F32(v) = &a.data else {
                return Err(bad(format!("{prefix}/{name} is not f32")));
            };
            store.set(&name, Tensor::from_vec(&a.dims, v.clone())?)?;
        }
        let extra = self
            .arrays
            .iter()
            .filter(|a| a.name.strip_prefix(prefix).is_some_and(|r| r.starts_with('/')))
            .count();
        if extra != store.len() {
            return Err(bad(format!("{prefix}: archive has {extra} tensors, model expects {}", store.len())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for text in [self.config_toml.clone(), self.meta.to_string()] {
            b.extend_from_slice(&(text.len() as u32).to_le_bytes());
            b.extend_from_slice(text.as_bytes());
        }
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            b.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            b.extend_from_slice(a.name.as_bytes());
            b.push(a.data.tag());
            b.push(a.dims.len() as u8);
            for &d in &a.dims {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let config_toml = r.string32()?;
        let meta = serde_json::from_str(&r.string32()?).map_err(|e| bad(format!("meta: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let data = match tag {
                0 => ArrayData::F32(r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::I64(r.take(n * 8)?.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
                t => return Err(bad(format!("{name}: unknown dtype {t}"))),
            };
            arrays.push(NamedArray { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config_toml, meta, arrays })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save_atomic(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("dataset = \"synthetic\"\n".into(), serde_json::json!({"step": 3}));
        a.push("w", &[2, 2], ArrayData::F32(vec![1.0, -2.0, 3.5, 0.0])).unwrap();
        a.push("bank", &[1, 3], ArrayData::F64(vec![0.6, 0.8, 0.0])).unwrap();
        a.push("labels", &[3], ArrayData::I64(vec![-1, 4, 2])).unwrap();
        a
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(Archive::from_bytes(&bytes).is_err());
        assert!(Archive::from_bytes(b"nope").is_err());
    }

    #[test]
    fn store_round_trip_and_atomic_save() {
        let mut s = ParamStore::new();
        s.add("conv.w", Tensor::filled(&[2, 3], 0.5));
        let mut a = Archive::new(String::new(), serde_json::Value::Null);
        a.push_store("student", &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        a.save_atomic(&p).unwrap();
        let back = Archive::load(&p).unwrap();
        let mut t = s.zeros_like();
        back.load_store("student", &mut t).unwrap();
        assert_eq!(s, t);
        assert!(!p.with_extension("tmp").exists());
        assert!(a.push("student/conv.w", &[1], ArrayData::I64(vec![0])).is_err());
    }
}
