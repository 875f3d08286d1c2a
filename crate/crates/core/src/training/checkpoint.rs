//! Binary checkpoint container.
//!
//! Layout (little-endian): `"TFCN"`, version `u16`, `u32` byte length plus
//! UTF-8 `key = value` config text, `u32` entry count, then per entry a `u16`
//! name length and UTF-8 name, dtype `u8` (0 = f32, 1 = f64), rank `u8`,
//! `rank` dims as `u64`, and the raw values.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TFCN";
pub const VERSION: u16 = 1;

/// A stored array of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    pub fn of<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Stored::F32(t.cast()),
            DType::F64 => Stored::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
        }
    }

    /// Convert to `T`; exact when the stored precision matches.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            Stored::F32(t) => t.cast(),
            Stored::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: KvConfig,
    pub entries: Vec<(String, Stored)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Stored> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        for (n, _) in &self.entries {
            if !seen.insert(n.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate entry {n:?}")));
            }
        }
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u16::<LittleEndian>(VERSION)?;
        let text = self.config.to_text();
        out.write_u32::<LittleEndian>(text.len() as u32)?;
        out.write_all(text.as_bytes())?;
        out.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.write_u16::<LittleEndian>(len)?;
            out.write_all(nb)?;
            let dtype = match t {
                Stored::F32(_) => DType::F32,
                Stored::F64(_) => DType::F64,
            };
            out.write_u8(dtype.code())?;
            out.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            match t {
                Stored::F32(t) => t
                    .data()
                    .iter()
                    .try_for_each(|&v| out.write_f32::<LittleEndian>(v))?,
                Stored::F64(t) => t
                    .data()
                    .iter()
                    .try_for_each(|&v| out.write_f64::<LittleEndian>(v))?,
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let trunc = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>().map_err(trunc)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let text = read_bytes(&mut r, len)?;
        let text =
            String::from_utf8(text).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = KvConfig::parse(&text)?;
        let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let nlen = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, nlen)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate entry {name:?}")));
            }
            let dtype = r.read_u8().map_err(trunc)?;
            let dtype = DType::from_code(dtype)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype {dtype}")))?;
            let rank = r.read_u8().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>().map_err(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            if r.len() < n.saturating_mul(width) {
                return Err(Error::Checkpoint(format!("truncated data for {name:?}")));
            }
            let t = match dtype {
                DType::F32 => {
                    let mut d = vec![0f32; n];
                    r.read_f32_into::<LittleEndian>(&mut d).map_err(trunc)?;
                    Stored::F32(Tensor::new(&shape, d)?)
                }
                DType::F64 => {
                    let mut d = vec![0f64; n];
                    r.read_f64_into::<LittleEndian>(&mut d).map_err(trunc)?;
                    Stored::F64(Tensor::new(&shape, d)?)
                }
            };
            entries.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { config, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_bytes(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head.to_vec())
}
