//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KWSM"  u32 version
//! u32 len, config JSON bytes
//! u32 tensor count, then per tensor:
//!     u32 name len, name bytes, u32 rank, u64 dims[rank], f32 values
//! u32 len, state JSON bytes
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use kws_tensor::Tensor;

use crate::error::{KwsError, Result};

pub const MAGIC: &[u8; 4] = b"KWSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub state: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_blob(&mut out, &serde_json::to_vec(&self.config)?)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_blob(&mut out, name.as_bytes())?;
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_blob(&mut out, &serde_json::to_vec(&self.state)?)?;
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(KwsError::Format("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(KwsError::Format("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let mut c = Cursor { bytes: body, pos: 4 };
        let version = c.u32()?;
        if version != VERSION {
            return Err(KwsError::Format(format!("unsupported version {version}")));
        }
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if crc32fast::hash(body) != stored {
            return Err(KwsError::Format("checksum mismatch".into()));
        }
        let config = serde_json::from_slice(c.blob()?)?;
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = String::from_utf8(c.blob()?.to_vec())
                .map_err(|_| KwsError::Format("tensor name is not UTF-8".into()))?;
            let rank = c.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = c.u64()?;
                shape.push(usize::try_from(d).map_err(|_| KwsError::Format("dimension overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| KwsError::Format(format!("tensor {name}: element count overflow")))?;
            let raw = c.take(numel.checked_mul(4).ok_or_else(|| KwsError::Format("length overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let state = serde_json::from_slice(c.blob()?)?;
        if c.pos != body.len() {
            return Err(KwsError::Format(format!(
                "{} trailing bytes before checksum",
                body.len() - c.pos
            )));
        }
        Ok(Self {
            config,
            tensors,
            state,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| KwsError::Format("length exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(KwsError::Format(format!(
                "length prefix at byte {} overruns the file",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| KwsError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| KwsError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KwsError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
