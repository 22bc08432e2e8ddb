//! Little-endian named-array container used for checkpoints and dataset caches.
//!
//! ```text
//! magic      8 bytes  "PROTUNE\0"
//! version    u32
//! digest     32 bytes sha256 of the metadata bytes
//! meta_len   u32, followed by UTF-8 JSON metadata
//! count      u32      number of records
//! payload    u64      total byte length of the records that follow
//! record*    name_len u16, name, dtype u8, flags u8, ndim u8,
//!            dims u32 × ndim, raw little-endian data (numel × 4 bytes)
//! ```
//!
//! `flags` bit 0 marks a frozen tensor, bit 1 a non-trainable buffer.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"PROTUNE\0";
pub const VERSION: u32 = 1;

pub const FLAG_FROZEN: u8 = 1;
pub const FLAG_BUFFER: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::U32(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub flags: u8,
    pub data: ArrayData,
}

impl Record {
    pub fn frozen(&self) -> bool {
        self.flags & FLAG_FROZEN != 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: String,
    pub records: Vec<Record>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Container {
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.meta.as_bytes()).into()
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for r in &self.records {
            payload.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            payload.extend_from_slice(r.name.as_bytes());
            payload.push(r.data.dtype());
            payload.push(r.flags);
            payload.push(r.shape.len() as u8);
            for &d in &r.shape {
                payload.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.data {
                ArrayData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 64 + self.meta.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a container. Errors carry a human-readable reason; callers attach the path.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic bytes".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {version} (expected {VERSION})"));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| "metadata is not UTF-8".to_string())?;
        let count = r.u32()? as usize;
        let payload = r.u64()? as usize;
        let remaining = bytes.len() - r.pos;
        if remaining != payload {
            return Err(format!(
                "length check failed: header declares {payload} payload bytes, file has {remaining} (truncated or padded)"
            ));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "record name is not UTF-8".to_string())?;
            let dtype = r.u8()?;
            let flags = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).map_err(|e| format!("record `{name}`: {e}"))?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match dtype {
                0 => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                1 => ArrayData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(format!("record `{name}`: unknown dtype {other}")),
            };
            records.push(Record { name, shape, flags, data });
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after last record".into());
        }
        let c = Container { meta, records };
        if c.digest() != digest {
            return Err("metadata digest mismatch".into());
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("unexpected end of file at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
