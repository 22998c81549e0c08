//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPVT"            magic
//! u32               format version (1)
//! u32               tensor count
//! per tensor:
//!   u16 + bytes     UTF-8 name
//!   u8              rank
//!   u32 × rank      dims
//!   u8              dtype (0 = f32, 1 = f64)
//!   values          raw LE, row-major
//! u32               CRC32 of every preceding byte
//! ```
//!
//! Tensors are written as f64, so save followed by load is bitwise exact.
//! f32 payloads are accepted on load and widened.

use std::path::Path;

use spvt::vit::ParamStore;
use spvt::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SPVT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("unknown dtype tag {0}")]
    Dtype(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint cannot represent {0}")]
    Unrepresentable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Serializes every tensor of `store` in store order.
pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| CheckpointError::Unrepresentable("tensor count".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Unrepresentable(format!("name `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Unrepresentable(format!("rank of `{name}`")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::Unrepresentable(format!("dim of `{name}`")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

/// Parses and verifies a checkpoint. The magic and checksum are checked
/// before anything else is trusted.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("shape of `{name}` overflows")))?;
        let data: Vec<f64> = match r.u8()? {
            DTYPE_F64 => {
                let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
            }
            DTYPE_F32 => {
                let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
                raw.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect()
            }
            other => return Err(CheckpointError::Dtype(other)),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
        store
            .insert(name, tensor)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Trailing(body.len() - r.pos));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode(store)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&std::fs::read(path)?)
}
