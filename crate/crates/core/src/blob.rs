//! Little-endian container of named blocks, used for dataset caches and checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "LIFNETB\0"
//! version  u32
//! count    u32
//! block*   name_len u32 | name utf-8 | kind u8 | payload
//!   kind 0 tensor:  rank u32 | dims u64 * rank | f64 * prod(dims)
//!   kind 1 bytes:   len u64 | bytes
//!   kind 2 indices: len u64 | u64 * len
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, SnnError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LIFNETB\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Tensor(Tensor),
    Bytes(Vec<u8>),
    Indices(Vec<u64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Blob {
    entries: Vec<(String, Block)>,
}

impl Blob {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block, replacing any earlier block of the same name in place.
    pub fn push(&mut self, name: impl Into<String>, block: Block) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = block,
            None => self.entries.push((name, block)),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Block::Tensor(t)) => Ok(t),
            _ => Err(SnnError::Contract(format!("missing tensor block `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Block::Bytes(b)) => Ok(b),
            _ => Err(SnnError::Contract(format!("missing byte block `{name}`"))),
        }
    }

    pub fn indices(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Block::Indices(v)) => Ok(v),
            _ => Err(SnnError::Contract(format!("missing index block `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(VERSION).unwrap();
        out.write_u32::<LE>(self.entries.len() as u32).unwrap();
        for (name, block) in &self.entries {
            out.write_u32::<LE>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            match block {
                Block::Tensor(t) => {
                    out.write_u8(0).unwrap();
                    out.write_u32::<LE>(t.shape().len() as u32).unwrap();
                    for &d in t.shape() {
                        out.write_u64::<LE>(d as u64).unwrap();
                    }
                    for &v in t.data() {
                        out.write_f64::<LE>(v).unwrap();
                    }
                }
                Block::Bytes(b) => {
                    out.write_u8(1).unwrap();
                    out.write_u64::<LE>(b.len() as u64).unwrap();
                    out.extend_from_slice(b);
                }
                Block::Indices(v) => {
                    out.write_u8(2).unwrap();
                    out.write_u64::<LE>(v.len() as u64).unwrap();
                    for &i in v {
                        out.write_u64::<LE>(i).unwrap();
                    }
                }
            }
        }
        out
    }

    /// Parses a blob; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let fail = |r: &Cursor<&[u8]>, msg: String| SnnError::Parse {
            path: origin.to_path_buf(),
            offset: r.position(),
            msg,
        };
        let truncated = |r: &Cursor<&[u8]>| fail(r, "unexpected end of data".into());

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated(&r))?;
        if &magic != MAGIC {
            r.set_position(0);
            return Err(fail(&r, "not a lifnet blob (bad magic)".into()));
        }
        let version = r.read_u32::<LE>().map_err(|_| truncated(&r))?;
        if version != VERSION {
            return Err(fail(&r, format!("unsupported blob version {version}")));
        }
        let count = r.read_u32::<LE>().map_err(|_| truncated(&r))?;
        let remaining = |r: &Cursor<&[u8]>| bytes.len() as u64 - r.position();
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.read_u32::<LE>().map_err(|_| truncated(&r))? as u64;
            if name_len > remaining(&r) {
                return Err(truncated(&r));
            }
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name).map_err(|_| truncated(&r))?;
            let name = String::from_utf8(name).map_err(|_| fail(&r, "block name is not utf-8".into()))?;
            let block = match r.read_u8().map_err(|_| truncated(&r))? {
                0 => {
                    let rank = r.read_u32::<LE>().map_err(|_| truncated(&r))?;
                    let mut shape = Vec::with_capacity(rank as usize);
                    for _ in 0..rank {
                        shape.push(r.read_u64::<LE>().map_err(|_| truncated(&r))? as usize);
                    }
                    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                    let n = match n {
                        Some(n) if (n as u64).saturating_mul(8) <= remaining(&r) => n,
                        _ => return Err(truncated(&r)),
                    };
                    let mut data = vec![0.0; n];
                    r.read_f64_into::<LE>(&mut data).map_err(|_| truncated(&r))?;
                    let at = r.position();
                    Block::Tensor(Tensor::new(shape, data).map_err(|e| SnnError::Parse {
                        path: origin.to_path_buf(),
                        offset: at,
                        msg: format!("block `{name}`: {e}"),
                    })?)
                }
                1 => {
                    let len = r.read_u64::<LE>().map_err(|_| truncated(&r))?;
                    if len > remaining(&r) {
                        return Err(truncated(&r));
                    }
                    let mut b = vec![0u8; len as usize];
                    r.read_exact(&mut b).map_err(|_| truncated(&r))?;
                    Block::Bytes(b)
                }
                2 => {
                    let len = r.read_u64::<LE>().map_err(|_| truncated(&r))?;
                    if len.saturating_mul(8) > remaining(&r) {
                        return Err(truncated(&r));
                    }
                    let mut v = vec![0u64; len as usize];
                    r.read_u64_into::<LE>(&mut v).map_err(|_| truncated(&r))?;
                    Block::Indices(v)
                }
                k => return Err(fail(&r, format!("unknown block kind {k}"))),
            };
            entries.push((name, block));
        }
        if remaining(&r) != 0 {
            return Err(fail(&r, "trailing bytes after last block".into()));
        }
        Ok(Blob { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| SnnError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| SnnError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SnnError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
